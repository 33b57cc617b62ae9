import pytest

from emucascade.graphbuild import build_graph
from emucascade.toygen import GenConfig, gen_brick


@pytest.fixture(scope="session")
def default_brick_graph():
    """One default-density brick with its labeled graph (shared: costly)."""
    brick, _truths = gen_brick(GenConfig(seed=2), brick_id=0)
    return build_graph(brick)


@pytest.fixture(scope="session")
def separated_brick():
    """A brick with a few well-separated showers plus its truth list."""
    cfg = GenConfig(
        n_showers=3,
        e_min=150.0,
        e_max=300.0,
        e_cutoff=5.0,
        ionization_mev_per_layer=4.0,
        seed=21,
        origin_half_x_um=45000.0,
        origin_half_y_um=35000.0,
        max_slope=0.2,
        min_origin_sep_um=30000.0,
    )
    return gen_brick(cfg, brick_id=0)
