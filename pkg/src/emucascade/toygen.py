"""Desk-scale synthetic generator of electromagnetic showers in a brick.

The cascade model is deliberately simple: particles advance plane by plane,
lose a fixed ionization energy per plane, occasionally split into two
half-energy children, and stop being recorded once they drop below a
threshold or leave the brick.  What is physically grounded is the multiple
scattering: slope kicks are drawn from the Gaussian-core angular law
P(dz, dtheta) = (2*dtheta/<t2>) * exp(-dtheta^2/<t2>) with
<t2> = (Es/(beta*E))^2 * dz/X0.

Per-shower and per-particle RNG streams are derived from (seed, lineage)
keys, so output is identical regardless of generation order or parallelism.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .tracks import (
    PITCH_Z_UM,
    MAX_PLANE_INDEX,
    UNLABELED,
    X_HALF_UM,
    Y_HALF_UM,
    BaseTrack,
    Brick,
    TrackFormatError,
)

ES_MEV = 21.0
X0_MM = 5000.0
MM_PER_UM = 1e-3


class OriginOutOfBrickError(ValueError):
    pass


@dataclass(frozen=True)
class GenConfig:
    """Generator parameters.  Energies in MeV, lengths in the noted unit.

    Defaults mirror the hard production regime: hundreds of small showers
    packed into a narrow transverse region, so most nearest-neighbour graph
    edges cross showers.  Override for easier, well-separated bricks.
    """

    n_showers: int = 300
    e_min: float = 10.0
    e_max: float = 30.0
    e_cutoff: float = 5.0
    seed: int = 0
    x0_mm: float = X0_MM          # radiation length driving the scattering law
    es_mev: float = ES_MEV        # critical energy in the scattering law
    beta: float = 1.0             # velocity relative to c
    split_length_mm: float = 25.0  # interaction length of the toy splitting law
    ionization_mev_per_layer: float = 5.0
    origin_half_x_um: float = 3500.0
    origin_half_y_um: float = 2800.0
    max_slope: float = 0.05
    min_origin_sep_um: float = 0.0

    def __post_init__(self):
        if self.e_min > self.e_max:
            raise ValueError("e_min must not exceed e_max")
        if self.e_cutoff <= 0:
            raise ValueError("e_cutoff must be positive")
        if self.x0_mm <= 0 or self.es_mev <= 0 or self.beta <= 0:
            raise ValueError("x0_mm, es_mev and beta must be positive")
        if self.split_length_mm <= 0:
            raise ValueError("split_length_mm must be positive")
        if self.origin_half_x_um > X_HALF_UM or self.origin_half_y_um > Y_HALF_UM:
            raise ValueError("origin box exceeds brick bounds")


@dataclass(frozen=True)
class ShowerTruth:
    shower_id: int
    x: float
    y: float
    z: float
    tx: float
    ty: float
    e_true: float
    track_ids: tuple[int, ...] = field(default_factory=tuple)


def mean_square_angle(e_mev, dz_um, es_mev=ES_MEV, x0_mm=X0_MM, beta=1.0):
    """<theta^2> of the projected-angle scattering law over a step dz."""
    return (es_mev / (beta * e_mev)) ** 2 * (dz_um * MM_PER_UM / x0_mm)


def sample_scatter(e_mev: float, dz_um: float, rng, size=None):
    """Draw scattering deflections dtheta by inverting the analytic CDF.

    CDF(t) = 1 - exp(-t^2/<theta^2>), so t = sqrt(-<theta^2> * log(1 - u)).
    """
    t2 = mean_square_angle(e_mev, dz_um)
    u = rng.random(size)
    return np.sqrt(-t2 * np.log1p(-u))


def _particle_rng(seed_key, lineage: int):
    entropy = list(seed_key) if isinstance(seed_key, (tuple, list)) else [int(seed_key)]
    return np.random.default_rng(np.random.SeedSequence(entropy + [lineage]))


def gen_shower(e0, origin, direction, cfg: GenConfig, seed_key, shower_id=0, id_start=0):
    """Grow one branching cascade from ``origin`` along ``direction``.

    Returns (tracks, truth).  Each live particle records one base-track per
    traversed plane while its energy stays at or above ``cfg.e_cutoff`` and
    it remains inside the transverse brick bounds.
    """
    ox, oy, oz = origin
    otx, oty = direction
    if not (-X_HALF_UM <= ox <= X_HALF_UM and -Y_HALF_UM <= oy <= Y_HALF_UM):
        raise OriginOutOfBrickError(f"origin ({ox}, {oy}) outside brick")
    k0 = int(round(oz / PITCH_Z_UM))
    if abs(oz - k0 * PITCH_Z_UM) > 0.5 or not 0 <= k0 <= MAX_PLANE_INDEX:
        raise OriginOutOfBrickError(f"origin z={oz} not on an emulsion plane")

    dz = PITCH_Z_UM
    p_split = 1.0 - math.exp(-dz * MM_PER_UM / cfg.split_length_mm)
    x0_um = cfg.x0_mm / MM_PER_UM
    theta_unit = (cfg.es_mev / cfg.beta) * math.sqrt(dz / x0_um)

    tracks: list[BaseTrack] = []
    next_id = id_start
    # particle: (lineage, energy, x, y, tx, ty, rng)
    particles = [(0, float(e0), float(ox), float(oy), float(otx), float(oty), _particle_rng(seed_key, 0))]
    for k in range(k0, MAX_PLANE_INDEX + 1):
        z = k * dz
        survivors = []
        for lineage, e, x, y, tx, ty, rng in particles:
            if e < cfg.e_cutoff:
                continue
            if not (-X_HALF_UM <= x <= X_HALF_UM and -Y_HALF_UM <= y <= Y_HALF_UM):
                continue
            tracks.append(BaseTrack(x=x, y=y, z=z, tx=tx, ty=ty, track_id=next_id, shower_id=shower_id))
            next_id += 1
            if k == MAX_PLANE_INDEX:
                continue
            # advance to the next plane, then scatter / lose energy / maybe split
            nx = x + tx * dz
            ny = y + ty * dz
            dtheta = (theta_unit / e) * math.sqrt(-math.log1p(-rng.random()))
            psi = 2.0 * math.pi * rng.random()
            ntx = tx + dtheta * math.cos(psi)
            nty = ty + dtheta * math.sin(psi)
            ne = e - cfg.ionization_mev_per_layer
            if rng.random() < p_split:
                half = ne / 2.0
                survivors.append((2 * lineage + 1, half, nx, ny, ntx, nty, _particle_rng(seed_key, 2 * lineage + 1)))
                survivors.append((2 * lineage + 2, half, nx, ny, ntx, nty, _particle_rng(seed_key, 2 * lineage + 2)))
            else:
                survivors.append((lineage, ne, nx, ny, ntx, nty, rng))
        particles = survivors
    truth = ShowerTruth(
        shower_id=shower_id,
        x=ox,
        y=oy,
        z=oz,
        tx=otx,
        ty=oty,
        e_true=float(e0),
        track_ids=tuple(t.track_id for t in tracks),
    )
    return tracks, truth


def gen_brick(cfg: GenConfig, brick_id: int = 0):
    """Generate a brick with ``cfg.n_showers`` showers and its truth list.

    Origins are uniform over the upstream half of the brick; directions are
    forward-going with slopes up to ``cfg.max_slope``.
    """
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, brick_id]))
    upstream_max_plane = MAX_PLANE_INDEX // 2
    tracks: list[BaseTrack] = []
    truths: list[ShowerTruth] = []
    placed: list[tuple[float, float]] = []
    for s in range(cfg.n_showers):
        for _ in range(1000):
            ox = rng.uniform(-cfg.origin_half_x_um, cfg.origin_half_x_um)
            oy = rng.uniform(-cfg.origin_half_y_um, cfg.origin_half_y_um)
            if cfg.min_origin_sep_um <= 0 or all(
                math.hypot(ox - px, oy - py) >= cfg.min_origin_sep_um for px, py in placed
            ):
                break
        else:
            raise ValueError("cannot place shower origins with the requested separation")
        placed.append((ox, oy))
        oz = rng.integers(0, upstream_max_plane + 1) * PITCH_Z_UM
        otx = rng.uniform(-cfg.max_slope, cfg.max_slope)
        oty = rng.uniform(-cfg.max_slope, cfg.max_slope)
        e0 = rng.uniform(cfg.e_min, cfg.e_max)
        shower_tracks, truth = gen_shower(
            e0,
            (ox, oy, oz),
            (otx, oty),
            cfg,
            seed_key=(cfg.seed, brick_id, s),
            shower_id=s,
            id_start=len(tracks),
        )
        tracks.extend(shower_tracks)
        truths.append(truth)
    return Brick(tracks=tuple(tracks), brick_id=brick_id), truths


TRUTH_CSV_HEADER = ["shower_id", "x", "y", "z", "tx", "ty", "E_true"]


def save_truth(truths, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRUTH_CSV_HEADER)
        for t in truths:
            writer.writerow(
                [t.shower_id] + [repr(float(v)) for v in (t.x, t.y, t.z, t.tx, t.ty, t.e_true)]
            )


def load_truth(path, brick: Brick | None = None):
    """Read a truth CSV; if ``brick`` is given, recover track_id membership
    from its shower labels."""
    members: dict[int, list[int]] = {}
    if brick is not None:
        for t in brick.tracks:
            if t.shower_id != UNLABELED:
                members.setdefault(t.shower_id, []).append(t.track_id)
    truths = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(TRUTH_CSV_HEADER) - set(reader.fieldnames):
            raise TrackFormatError("truth CSV missing required columns")
        for line_no, row in enumerate(reader, start=2):
            try:
                sid = int(row["shower_id"])
                truths.append(
                    ShowerTruth(
                        shower_id=sid,
                        x=float(row["x"]),
                        y=float(row["y"]),
                        z=float(row["z"]),
                        tx=float(row["tx"]),
                        ty=float(row["ty"]),
                        e_true=float(row["E_true"]),
                        track_ids=tuple(members.get(sid, ())),
                    )
                )
            except (KeyError, ValueError) as exc:
                raise TrackFormatError(f"line {line_no}: cannot parse truth row ({exc})") from exc
    return truths
