"""Shared fixtures-by-hand for the network tests."""

import numpy as np

from emucascade import autodiff as ad
from emucascade.graphbuild import TrackGraph
from emucascade.tracks import PITCH_Z_UM


def make_graph(n_vertices, edges, d_edge=6, seed=0, planes=None):
    """Hand-built TrackGraph; edges as (src, dst) index pairs."""
    rng = np.random.default_rng(seed)
    planes = np.arange(n_vertices) if planes is None else np.asarray(planes)
    vf = rng.normal(size=(n_vertices, 10))
    vf[:, 2] = planes * PITCH_Z_UM
    edges = list(edges)
    src = np.array([e[0] for e in edges], dtype=np.int64)
    dst = np.array([e[1] for e in edges], dtype=np.int64)
    ef = rng.normal(size=(len(edges), d_edge))
    tids = np.arange(n_vertices, dtype=np.int64)
    order = np.lexsort((tids[src], tids[dst], planes[dst])) if len(edges) else np.empty(0, dtype=np.int64)
    return TrackGraph(
        track_ids=tids,
        vertex_feats=vf,
        plane=planes.astype(np.int64),
        src=src[order],
        dst=dst[order],
        edge_feats=ef[order] if len(edges) else ef,
        labels=rng.integers(0, 2, size=len(edges)).astype(np.int8) if len(edges) else None,
    )


def block_params(d, rng, prefix="b0_"):
    """Random small block weights (glorot-ish), biases zero."""

    def w(shape):
        lim = np.sqrt(6.0 / sum(shape))
        return ad.param(rng.uniform(-lim, lim, size=shape))

    return {
        prefix + "M1_W": w((3 * d, d)),
        prefix + "M1_b": ad.param(np.zeros(d)),
        prefix + "M2_W": w((d, d)),
        prefix + "M2_b": ad.param(np.zeros(d)),
        prefix + "U1_W": w((2 * d, d)),
        prefix + "U1_b": ad.param(np.zeros(d)),
        prefix + "U2_W": w((d, d)),
        prefix + "U2_b": ad.param(np.zeros(d)),
    }


def passthrough_block_params(d, prefix="b0_", bias=30.0):
    """Weights making M(h_v, h_w, e) ~ h_v and U(h, m) ~ h + m.

    The large positive bias keeps the softplus in its linear regime, so one
    plane-sweep pass accumulates the source state with per-hop gain ~ 1 and
    a perturbation survives arbitrarily many hops.  This isolates the
    structural receptive-field property from weight-product decay.
    """
    eye = np.eye(d)
    pick_first = np.vstack([eye, np.zeros((d, d)), np.zeros((d, d))])
    sum_both = np.vstack([eye, eye])
    return {
        prefix + "M1_W": ad.const(pick_first),
        prefix + "M1_b": ad.const(np.full(d, bias)),
        prefix + "M2_W": ad.const(eye),
        prefix + "M2_b": ad.const(np.full(d, -bias)),
        prefix + "U1_W": ad.const(sum_both),
        prefix + "U1_b": ad.const(np.full(d, bias)),
        prefix + "U2_W": ad.const(eye),
        prefix + "U2_b": ad.const(np.full(d, -bias)),
    }


def chain_track_graph(n, seed=3):
    return make_graph(n, [(i, i + 1) for i in range(n - 1)], seed=seed)
