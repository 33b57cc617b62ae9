"""Directed track-graph construction: integral-distance kNN edges plus
vertex and edge feature engineering.

Vertices are base-tracks; an edge always points from the smaller-z track to
the larger-z track, so the graph is a DAG ordered by emulsion plane.  Edge
candidates are ranked by the "integral distance": the area between the two
tracks' linear extrapolations over their z gap, which integrates in closed
form as a piecewise |linear| primitive.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .tracks import PITCH_Z_UM, UNLABELED, BaseTrack, Brick
from .toygen import ES_MEV, X0_MM, ShowerTruth, mean_square_angle
from .validation import clamp_magnitude

EDGE_FEATURE_NAMES = ("int_dist", "ip_x", "ip_y", "e_pair", "log_likeliness", "dtheta")
VERTEX_FEATURE_NAMES = ("x", "y", "z", "tx", "ty", "phi", "r_over_z", "x_over_z", "y_over_z", "trig")

E_GRID_MIN_MEV = 1.0
E_GRID_MAX_MEV = 1e5
EPS_DENOM = 1e-6


class SamePlaneError(ValueError):
    pass


class UnlabeledTrackError(ValueError):
    pass


class GraphFormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# pairwise geometry


def _abs_linear_integral(a, b, zl, zh):
    """Integral of |a*z - b| over [zl, zh], splitting at the root if inside."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    zl = np.asarray(zl, dtype=float)
    zh = np.asarray(zh, dtype=float)

    def prim(z):
        return 0.5 * a * z * z - b * z

    safe_a = np.where(a == 0.0, 1.0, a)
    root = b / safe_a
    inside = (a != 0.0) & (zl < root) & (root < zh)
    whole = np.abs(prim(zh) - prim(zl))
    split = np.abs(prim(root) - prim(zl)) + np.abs(prim(zh) - prim(root))
    return np.where(inside, split, whole)


def _int_dist_arrays(x1, y1, z1, tx1, ty1, x2, y2, z2, tx2, ty2):
    """Closed-form integral distance with track 1 at the smaller z."""
    ax = tx2 - tx1
    bx = x1 - x2 + tx2 * (z2 - z1)
    ay = ty2 - ty1
    by = y1 - y2 + ty2 * (z2 - z1)
    zl = np.minimum(z1, z2)
    zh = np.maximum(z1, z2)
    return _abs_linear_integral(ax, bx, zl, zh) + _abs_linear_integral(ay, by, zl, zh)


def int_dist(a: BaseTrack, b: BaseTrack) -> float:
    """Area between two tracks' linear extrapolations over their z gap (um^2).

    Symmetric in its arguments: the pair is canonically ordered by
    (z, x, y, tx, ty) before evaluation.
    """
    ka = (a.z, a.x, a.y, a.tx, a.ty)
    kb = (b.z, b.x, b.y, b.tx, b.ty)
    t1, t2 = (a, b) if ka <= kb else (b, a)
    return float(
        _int_dist_arrays(t1.x, t1.y, t1.z, t1.tx, t1.ty, t2.x, t2.y, t2.z, t2.tx, t2.ty)
    )


def _ip_arrays(x1, y1, z2, dx, dy):
    ipx = (dx - dy * z2) / clamp_magnitude(dy, EPS_DENOM)
    ipy = (dy - dx * z2) / clamp_magnitude(dx, EPS_DENOM)
    return ipx, ipy


def ip_projections(a: BaseTrack, b: BaseTrack):
    """Impact-parameter projections of a track pair on the X and Y axes.

    Implemented verbatim as (x1 - x2 - (y1 - y2)*z2) / (y1 - y2) with the
    denominator clamped away from zero, plus the x<->y mirrored form.
    """
    ipx, ipy = _ip_arrays(a.x, a.y, b.z, a.x - b.x, a.y - b.y)
    return float(ipx), float(ipy)


# ---------------------------------------------------------------------------
# pair energy / likeliness from the multiple-scattering law


def _pair_loglik_terms(dz_um, dthx, dthy, dx_um, dy_um, es_mev, x0_mm, beta, p_term_only):
    """Coefficients (c0, a, b) of logL(E) = c0 + a*ln(E) - b*E^2.

    The scattering variance scales as 1/E^2, so every factor of the pair
    likelihood contributes a*ln(E) - b*E^2; the sum stays concave in ln E.
    """
    k = mean_square_angle(1.0, dz_um, es_mev, x0_mm, beta)  # <theta^2> * E^2
    dtheta = np.hypot(dthx, dthy)
    dtheta_c = np.maximum(dtheta, 1e-12)
    if p_term_only:
        a = 2.0
        b = dtheta**2 / k
        c0 = np.log(2.0 * dtheta_c) - np.log(k)
    else:
        a = 6.0
        b = (
            dtheta**2 / k
            + (dthx**2 + dthy**2) / (2.0 * k)
            + 3.0 * (dx_um**2 + dy_um**2) / (2.0 * k * dz_um**2)
        )
        c0 = (
            np.log(2.0 * dtheta_c)
            - np.log(k)
            - np.log(2.0 * np.pi * k)
            - np.log(2.0 * np.pi * k * dz_um**2 / 3.0)
        )
    return c0, a, b, dtheta


_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0


def _argmax_loglik(c0, a, b, grid_points=256, refine_iters=40):
    """Maximize c0 + a*ln(E) - b*E^2 over the energy grid, then refine by
    golden section on ln E inside the bracketing grid cell."""
    t_grid = np.linspace(np.log(E_GRID_MIN_MEV), np.log(E_GRID_MAX_MEV), grid_points)
    b = np.atleast_1d(np.asarray(b, dtype=float))
    c0 = np.atleast_1d(np.asarray(c0, dtype=float))
    vals = a * t_grid[None, :] - b[:, None] * np.exp(2.0 * t_grid)[None, :]
    idx = np.argmax(vals, axis=1)
    lo = t_grid[np.maximum(idx - 1, 0)]
    hi = t_grid[np.minimum(idx + 1, grid_points - 1)]

    def f(t):
        return a * t - b * np.exp(2.0 * t)

    x1 = hi - _INVPHI * (hi - lo)
    x2 = lo + _INVPHI * (hi - lo)
    f1 = f(x1)
    f2 = f(x2)
    for _ in range(refine_iters):
        take_left = f1 >= f2
        hi = np.where(take_left, x2, hi)
        lo = np.where(take_left, lo, x1)
        x2n = np.where(take_left, x1, lo + _INVPHI * (hi - lo))
        x1n = np.where(take_left, hi - _INVPHI * (hi - lo), x2)
        f2n = np.where(take_left, f1, f(lo + _INVPHI * (hi - lo)))
        f1n = np.where(take_left, f(hi - _INVPHI * (hi - lo)), f2)
        x1, x2, f1, f2 = x1n, x2n, f1n, f2n
    t_star = 0.5 * (lo + hi)
    e_star = np.clip(np.exp(t_star), E_GRID_MIN_MEV, E_GRID_MAX_MEV)
    loglik = c0 + a * np.log(e_star) - b * e_star**2
    return e_star, loglik


def pair_energy_likeliness(
    a: BaseTrack,
    b: BaseTrack,
    es_mev: float = ES_MEV,
    x0_mm: float = X0_MM,
    beta: float = 1.0,
    grid_points: int = 256,
    p_term_only: bool = False,
):
    """Most-likely pair energy (MeV) and the maximized log-likelihood.

    The likelihood combines the angular-deflection law with Gaussian factors
    for the slope and displacement residuals; ``p_term_only`` keeps only the
    angular-deflection factor (used by calibration checks).
    """
    if a.z == b.z:
        raise SamePlaneError("pair energy estimate needs tracks on different planes")
    t1, t2 = (a, b) if a.z < b.z else (b, a)
    dz = t2.z - t1.z
    dthx = t2.tx - t1.tx
    dthy = t2.ty - t1.ty
    dx = t2.x - t1.x - t1.tx * dz
    dy = t2.y - t1.y - t1.ty * dz
    c0, acoef, bcoef, _ = _pair_loglik_terms(dz, dthx, dthy, dx, dy, es_mev, x0_mm, beta, p_term_only)
    e_star, loglik = _argmax_loglik(c0, acoef, bcoef, grid_points)
    return float(e_star[0]), float(loglik[0])


# ---------------------------------------------------------------------------
# vertex features


def _vertex_feature_arrays(x, y, z, tx, ty):
    phi = np.arctan2(y, x)
    z_c = clamp_magnitude(z, EPS_DENOM)
    phi_c = clamp_magnitude(phi, EPS_DENOM)
    return np.column_stack(
        [
            x,
            y,
            z,
            tx,
            ty,
            phi,
            np.hypot(x, y) / z_c,
            x / z_c,
            y / z_c,
            (np.sin(phi) + np.cos(phi)) / phi_c,
        ]
    )


def vertex_features(t: BaseTrack) -> np.ndarray:
    """10-component feature vector of a single track."""
    return _vertex_feature_arrays(
        np.array([t.x]), np.array([t.y]), np.array([t.z]), np.array([t.tx]), np.array([t.ty])
    )[0]


# ---------------------------------------------------------------------------
# graph container


@dataclass
class TrackGraph:
    """Directed track graph with per-vertex and per-edge features.

    Vertices are stored sorted by (z, track_id); edges sorted by
    (destination plane, destination id, source id).  ``src``/``dst`` are
    positions into the vertex arrays, not track ids.
    """

    track_ids: np.ndarray          # (n,) int64
    vertex_feats: np.ndarray       # (n, 10) float64
    plane: np.ndarray              # (n,) int64 emulsion plane index
    src: np.ndarray                # (m,) int64
    dst: np.ndarray                # (m,) int64
    edge_feats: np.ndarray         # (m, f) float64
    feature_names: tuple[str, ...] = EDGE_FEATURE_NAMES
    labels: np.ndarray | None = None          # (m,) int8 in {0, 1}
    probabilities: np.ndarray | None = None   # (m,) float64 in [0, 1]
    cluster_labels: np.ndarray | None = None  # (n,) int64, -1 = noise

    @property
    def n_vertices(self) -> int:
        return len(self.track_ids)

    @property
    def n_edges(self) -> int:
        return len(self.src)


def _canonical_vertex_order(z, track_ids):
    return np.lexsort((track_ids, z))


def _canonical_edge_order(src, dst, plane, track_ids):
    return np.lexsort((track_ids[src], track_ids[dst], plane[dst]))


def build_graph(
    brick: Brick,
    k: int = 10,
    es_mev: float = ES_MEV,
    x0_mm: float = X0_MM,
    beta: float = 1.0,
    grid_points: int = 256,
    include_dtheta: bool = True,
    chunk: int = 512,
) -> TrackGraph:
    """Construct the directed graph for one brick.

    Candidate edges run from each track to every strictly-larger-z track;
    the retained set is the union of each vertex's k best outgoing and k
    best incoming candidates by integral distance.  Ties are broken by
    (z gap, track id) so the selection is deterministic.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    n = len(brick.tracks)
    x = np.array([t.x for t in brick.tracks], dtype=float)
    y = np.array([t.y for t in brick.tracks], dtype=float)
    z = np.array([t.z for t in brick.tracks], dtype=float)
    tx = np.array([t.tx for t in brick.tracks], dtype=float)
    ty = np.array([t.ty for t in brick.tracks], dtype=float)
    tids = np.array([t.track_id for t in brick.tracks], dtype=np.int64)

    order = _canonical_vertex_order(z, tids)
    x, y, z, tx, ty, tids = x[order], y[order], z[order], tx[order], ty[order], tids[order]
    plane = np.rint(z / PITCH_Z_UM).astype(np.int64)
    shower = np.array([brick.tracks[i].shower_id for i in order], dtype=np.int64)

    feats = _vertex_feature_arrays(x, y, z, tx, ty)

    if n < 2:
        return TrackGraph(
            track_ids=tids,
            vertex_feats=feats,
            plane=plane,
            src=np.empty(0, dtype=np.int64),
            dst=np.empty(0, dtype=np.int64),
            edge_feats=np.empty((0, 6 if include_dtheta else 5)),
            feature_names=EDGE_FEATURE_NAMES if include_dtheta else EDGE_FEATURE_NAMES[:5],
        )

    def pair_dists(rows):
        """Integral distance of rows x all vertices; +inf where no edge."""
        d = _int_dist_arrays(
            x[rows, None], y[rows, None], z[rows, None], tx[rows, None], ty[rows, None],
            x[None, :], y[None, :], z[None, :], tx[None, :], ty[None, :],
        )
        return np.where(z[None, :] > z[rows, None], d, np.inf)

    def topk_rows(dist_block, gap_block, ids, kk):
        """Per row: indices of the kk smallest by (dist, gap, id)."""
        picked = []
        for row_d, row_g in zip(dist_block, gap_block):
            valid = np.flatnonzero(np.isfinite(row_d))
            if len(valid) == 0:
                picked.append(valid)
                continue
            sel = valid[np.lexsort((ids[valid], row_g[valid], row_d[valid]))[:kk]]
            picked.append(sel)
        return picked

    out_pairs = []
    in_pairs = []
    for start in range(0, n, chunk):
        rows = np.arange(start, min(start + chunk, n))
        d = pair_dists(rows)
        gaps = z[None, :] - z[rows, None]
        for local, sel in enumerate(topk_rows(d, gaps, tids, k)):
            i = rows[local]
            for j in sel:
                out_pairs.append((i, j))
    # incoming pass (recompute column-wise to bound memory)
    for start in range(0, n, chunk):
        cols = np.arange(start, min(start + chunk, n))
        d = _int_dist_arrays(
            x[:, None], y[:, None], z[:, None], tx[:, None], ty[:, None],
            x[None, cols], y[None, cols], z[None, cols], tx[None, cols], ty[None, cols],
        )
        d = np.where(z[None, cols] > z[:, None], d, np.inf).T  # (c, n): sources into each col
        gaps = z[cols][:, None] - z[None, :]
        for local, sel in enumerate(topk_rows(d, gaps, tids, k)):
            j = cols[local]
            for i in sel:
                in_pairs.append((i, j))

    pairs = np.array(sorted(set(out_pairs) | set(in_pairs)), dtype=np.int64)
    src, dst = pairs[:, 0], pairs[:, 1]

    # edge features
    dz = z[dst] - z[src]
    dists = _int_dist_arrays(x[src], y[src], z[src], tx[src], ty[src], x[dst], y[dst], z[dst], tx[dst], ty[dst])
    ipx, ipy = _ip_arrays(x[src], y[src], z[dst], x[src] - x[dst], y[src] - y[dst])
    dthx = tx[dst] - tx[src]
    dthy = ty[dst] - ty[src]
    dx_res = x[dst] - x[src] - tx[src] * dz
    dy_res = y[dst] - y[src] - ty[src] * dz
    c0, acoef, bcoef, dtheta = _pair_loglik_terms(dz, dthx, dthy, dx_res, dy_res, es_mev, x0_mm, beta, False)
    e_pair, loglik = _argmax_loglik(c0, acoef, bcoef, grid_points)
    cols = [dists, ipx, ipy, e_pair, loglik]
    names = EDGE_FEATURE_NAMES[:5]
    if include_dtheta:
        cols.append(dtheta)
        names = EDGE_FEATURE_NAMES
    edge_feats = np.column_stack(cols)

    eorder = _canonical_edge_order(src, dst, plane, tids)
    g = TrackGraph(
        track_ids=tids,
        vertex_feats=feats,
        plane=plane,
        src=src[eorder],
        dst=dst[eorder],
        edge_feats=edge_feats[eorder],
        feature_names=names,
    )
    if np.all(shower != UNLABELED):
        g.labels = (shower[g.src] == shower[g.dst]).astype(np.int8)
    return g


def edge_labels(g: TrackGraph, truth) -> TrackGraph:
    """Attach binary same-shower labels to every edge (in place, returns g).

    ``truth`` is either a list of ShowerTruth or a mapping track_id ->
    shower_id; every track in the graph must be covered.
    """
    if isinstance(truth, dict):
        mapping = truth
    else:
        mapping = {}
        for t in truth:
            for tid in t.track_ids:
                mapping[tid] = t.shower_id
    shower = np.full(g.n_vertices, UNLABELED, dtype=np.int64)
    for i, tid in enumerate(g.track_ids):
        shower[i] = mapping.get(int(tid), UNLABELED)
    if np.any(shower == UNLABELED):
        missing = g.track_ids[shower == UNLABELED][:10]
        raise UnlabeledTrackError(f"tracks without shower labels: {missing.tolist()}")
    g.labels = (shower[g.src] == shower[g.dst]).astype(np.int8)
    return g


# ---------------------------------------------------------------------------
# JSON-lines graph file


def save_graph(g: TrackGraph, path) -> None:
    """Write vertices then edges as JSON lines."""
    with open(path, "w", encoding="utf-8") as fh:
        for i in range(g.n_vertices):
            rec = {"v": int(g.track_ids[i]), "f": [float(v) for v in g.vertex_feats[i]]}
            if g.cluster_labels is not None:
                rec["c"] = int(g.cluster_labels[i])
            fh.write(json.dumps(rec) + "\n")
        for e in range(g.n_edges):
            rec = {
                "e": [int(g.track_ids[g.src[e]]), int(g.track_ids[g.dst[e]])],
                "f": [float(v) for v in g.edge_feats[e]],
                "y": int(g.labels[e]) if g.labels is not None else None,
                "p": float(g.probabilities[e]) if g.probabilities is not None else None,
            }
            fh.write(json.dumps(rec) + "\n")


def load_graph(path) -> TrackGraph:
    verts: list[tuple[int, list[float], int | None]] = []
    edges: list[tuple[int, int, list[float], int | None, float | None]] = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise GraphFormatError(f"line {line_no}: invalid JSON ({exc})") from exc
            if "v" in rec:
                verts.append((int(rec["v"]), rec["f"], rec.get("c")))
            elif "e" in rec:
                edges.append((rec["e"][0], rec["e"][1], rec["f"], rec.get("y"), rec.get("p")))
            else:
                raise GraphFormatError(f"line {line_no}: record is neither vertex nor edge")
    if not verts:
        raise GraphFormatError("graph file holds no vertices")
    tids = np.array([v[0] for v in verts], dtype=np.int64)
    feats = np.array([v[1] for v in verts], dtype=float)
    clusters = None
    if any(v[2] is not None for v in verts):
        clusters = np.array([UNLABELED if v[2] is None else int(v[2]) for v in verts], dtype=np.int64)
    z = feats[:, 2]
    order = _canonical_vertex_order(z, tids)
    tids, feats = tids[order], feats[order]
    if clusters is not None:
        clusters = clusters[order]
    plane = np.rint(feats[:, 2] / PITCH_Z_UM).astype(np.int64)
    index = {int(t): i for i, t in enumerate(tids)}
    try:
        src = np.array([index[e[0]] for e in edges], dtype=np.int64)
        dst = np.array([index[e[1]] for e in edges], dtype=np.int64)
    except KeyError as exc:
        raise GraphFormatError(f"edge references unknown track id {exc}") from exc
    efeats = np.array([e[2] for e in edges], dtype=float) if edges else np.empty((0, 6))
    labels = None
    if edges and all(e[3] is not None for e in edges):
        labels = np.array([e[3] for e in edges], dtype=np.int8)
    probs = None
    if edges and all(e[4] is not None for e in edges):
        probs = np.array([e[4] for e in edges], dtype=float)
    eorder = _canonical_edge_order(src, dst, plane, tids) if edges else np.empty(0, dtype=np.int64)
    names = EDGE_FEATURE_NAMES if efeats.shape[1] == 6 else EDGE_FEATURE_NAMES[: efeats.shape[1]]
    return TrackGraph(
        track_ids=tids,
        vertex_feats=feats,
        plane=plane,
        src=src[eorder] if edges else src,
        dst=dst[eorder] if edges else dst,
        edge_feats=efeats[eorder] if edges else efeats,
        feature_names=names,
        labels=labels[eorder] if labels is not None else None,
        probabilities=probs[eorder] if probs is not None else None,
        cluster_labels=clusters,
    )


class GraphBuilder(BaseEstimator, TransformerMixin):
    """Estimator-style wrapper around :func:`build_graph`.

    Stateless: ``fit`` only validates parameters, ``transform`` maps a Brick
    (or list of Bricks) to TrackGraph(s).
    """

    def __init__(self, k=10, es_mev=ES_MEV, x0_mm=X0_MM, beta=1.0, grid_points=256, include_dtheta=True):
        self.k = k
        self.es_mev = es_mev
        self.x0_mm = x0_mm
        self.beta = beta
        self.grid_points = grid_points
        self.include_dtheta = include_dtheta

    def fit(self, X=None, y=None):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        return self

    def transform(self, X):
        kwargs = dict(
            k=self.k,
            es_mev=self.es_mev,
            x0_mm=self.x0_mm,
            beta=self.beta,
            grid_points=self.grid_points,
            include_dtheta=self.include_dtheta,
        )
        if isinstance(X, Brick):
            return build_graph(X, **kwargs)
        return [build_graph(b, **kwargs) for b in X]
