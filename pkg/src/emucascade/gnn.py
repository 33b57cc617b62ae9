"""Edge classifier for track graphs.

Architecture: a per-vertex/per-edge affine encoder, a stack of two kinds of
message-passing blocks, and a dense head scoring each directed edge.

* EdgeConv block: synchronous update, messages M(h_v, h_w - h_v, e_vw)
  aggregated over each vertex's incoming edges.  Information travels one
  hop per pass.
* EmulsionConv block: edges are grouped by the destination's emulsion
  plane and the groups are processed in increasing z, reusing the already
  updated source states, so a single pass sweeps the whole brick.

Training minimizes focal loss with Adam, early-stopping on validation
ROC-AUC.  Everything is seeded and single-threaded, so runs are bit
reproducible.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from sklearn.base import BaseEstimator

from . import autodiff as ad
from .graphbuild import TrackGraph

MODEL_FORMAT_VERSION = 1

BLOCK_ORDERS = ("emulsion_first", "edge_first", "interleaved")
AGGREGATIONS = ("mean", "max")

# granularity below which validation-AUC differences count as noise
AUC_MIN_DELTA = 1e-4


class SingleClassError(ValueError):
    pass


class ModelFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d_hidden: int = 32
    n_emulsion: int = 3
    n_edge: int = 5
    block_order: str = "emulsion_first"
    aggregation: str = "mean"
    seed: int = 0

    def __post_init__(self):
        if self.d_hidden < 1:
            raise ValueError("d_hidden must be >= 1")
        if self.n_emulsion + self.n_edge < 1:
            raise ValueError("need at least one message-passing block")
        if self.block_order not in BLOCK_ORDERS:
            raise ValueError(f"block_order must be one of {BLOCK_ORDERS}")
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"aggregation must be one of {AGGREGATIONS}")

    def block_kinds(self) -> list[str]:
        if self.block_order == "emulsion_first":
            return ["emulsion"] * self.n_emulsion + ["edge"] * self.n_edge
        if self.block_order == "edge_first":
            return ["edge"] * self.n_edge + ["emulsion"] * self.n_emulsion
        kinds = []
        e_left, g_left = self.n_emulsion, self.n_edge
        while e_left or g_left:
            if e_left:
                kinds.append("emulsion")
                e_left -= 1
            if g_left:
                kinds.append("edge")
                g_left -= 1
        return kinds


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    max_epochs: int = 5000
    patience: int = 100
    gamma_focal: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.gamma_focal < 0:
            raise ValueError("gamma_focal must be >= 0")


# ---------------------------------------------------------------------------
# graph index structure for the segment reductions


class GraphTensors:
    """Index structure for one graph: canonical edge order by destination
    plane, contiguous per-destination runs, and per-plane group ranges."""

    def __init__(self, g: TrackGraph):
        self.n = g.n_vertices
        self.src = g.src
        self.dst = g.dst
        self.vertex_feats = g.vertex_feats
        self.edge_feats = g.edge_feats
        self.labels = g.labels
        m = g.n_edges
        if m:
            change = np.flatnonzero(np.diff(g.dst) != 0)
            self.run_starts = np.concatenate([[0], change + 1]).astype(np.int64)
            run_ends = np.concatenate([change + 1, [m]]).astype(np.int64)
            self.run_counts = run_ends - self.run_starts
            self.run_udst = g.dst[self.run_starts]
            dplane = g.plane[g.dst]
            gchange = np.flatnonzero(np.diff(dplane) != 0)
            group_lo = np.concatenate([[0], gchange + 1]).astype(np.int64)
            group_hi = np.concatenate([gchange + 1, [m]]).astype(np.int64)
            # run ranges belonging to each plane group
            run_of_edge = np.searchsorted(self.run_starts, group_lo, side="left")
            run_hi = np.searchsorted(self.run_starts, group_hi, side="left")
            self.groups = list(zip(group_lo, group_hi, run_of_edge, run_hi))
        else:
            self.run_starts = np.empty(0, dtype=np.int64)
            self.run_counts = np.empty(0, dtype=np.int64)
            self.run_udst = np.empty(0, dtype=np.int64)
            self.groups = []


def _mlp2(x, params, prefix):
    h = ad.add(ad.matmul(x, params[prefix + "1_W"]), params[prefix + "1_b"])
    h = ad.softplus(h)
    return ad.add(ad.matmul(h, params[prefix + "2_W"]), params[prefix + "2_b"])


def _aggregate(msg, starts, counts, aggregation):
    if aggregation == "mean":
        return ad.segment_mean(msg, starts, counts)
    return ad.segment_max(msg, starts, counts)


def edgeconv_forward(gt: GraphTensors, h, e, params, prefix, aggregation="mean"):
    """One synchronous message-passing step; returns updated vertex states.

    Every vertex is updated, with a zero aggregated message when it has no
    incoming edges.
    """
    d = h.data.shape[1]
    if len(gt.src):
        hs = ad.gather_rows(h, gt.src)
        hd = ad.gather_rows(h, gt.dst)
        m_in = ad.concat([hs, ad.sub(hd, hs), e])
        msg = _mlp2(m_in, params, prefix + "M")
        agg = _aggregate(msg, gt.run_starts, gt.run_counts, aggregation)
        full = ad.scatter_rows(ad.const(np.zeros((gt.n, d))), gt.run_udst, agg)
    else:
        full = ad.const(np.zeros((gt.n, d)))
    return _mlp2(ad.concat([h, full]), params, prefix + "U")


def emulsionconv_forward(gt: GraphTensors, h, e, params, prefix, aggregation="mean"):
    """Plane-sweeping message passing: destination-plane groups processed in
    increasing z, each reusing the source states already updated by earlier
    groups, so one pass carries information across all planes."""
    for lo, hi, rlo, rhi in gt.groups:
        eidx = np.arange(lo, hi)
        hs = ad.gather_rows(h, gt.src[lo:hi])
        hd = ad.gather_rows(h, gt.dst[lo:hi])
        eg = ad.gather_rows(e, eidx)
        msg = _mlp2(ad.concat([hs, hd, eg]), params, prefix + "M")
        starts = gt.run_starts[rlo:rhi] - lo
        counts = gt.run_counts[rlo:rhi]
        udst = gt.run_udst[rlo:rhi]
        agg = _aggregate(msg, starts, counts, aggregation)
        upd = _mlp2(ad.concat([ad.gather_rows(h, udst), agg]), params, prefix + "U")
        h = ad.scatter_rows(h, udst, upd)
    return h


def classifier_forward(gt: GraphTensors, h, e, params):
    """Per-edge probability in (0, 1) from dense layers on (h_src, h_dst, e)."""
    hs = ad.gather_rows(h, gt.src)
    hd = ad.gather_rows(h, gt.dst)
    logits = _mlp2(ad.concat([hs, hd, e]), params, "head")
    return ad.sigmoid(logits)


def focal_loss(p, y, gamma: float):
    """Mean of -(1 - p_t)^gamma * log(p_t); p clamped to [1e-7, 1 - 1e-7]."""
    if not isinstance(p, ad.Tensor):
        p = ad.const(np.asarray(p, dtype=float))
    y = np.asarray(y, dtype=float).reshape(p.data.shape)
    p = ad.clip(p, 1e-7, 1.0 - 1e-7)
    pt = ad.add(ad.mul(p, 2.0 * y - 1.0), 1.0 - y)
    focus = ad.power(ad.sub(1.0, pt), gamma) if gamma != 0.0 else ad.const(np.ones_like(y))
    return ad.mean_all(ad.neg(ad.mul(focus, ad.log(pt))))


# ---------------------------------------------------------------------------
# model container


@dataclass
class GnnModel:
    config: ModelConfig
    edge_dim: int
    params: dict[str, np.ndarray]
    v_mean: np.ndarray
    v_std: np.ndarray
    e_mean: np.ndarray
    e_std: np.ndarray


def _param_shapes(cfg: ModelConfig, edge_dim: int):
    d = cfg.d_hidden
    shapes: list[tuple[str, tuple[int, ...]]] = [
        ("enc_v_W", (10, d)),
        ("enc_v_b", (d,)),
        ("enc_e_W", (edge_dim, d)),
        ("enc_e_b", (d,)),
    ]
    for i, _kind in enumerate(cfg.block_kinds()):
        pre = f"b{i}_"
        shapes += [
            (pre + "M1_W", (3 * d, d)),
            (pre + "M1_b", (d,)),
            (pre + "M2_W", (d, d)),
            (pre + "M2_b", (d,)),
            (pre + "U1_W", (2 * d, d)),
            (pre + "U1_b", (d,)),
            (pre + "U2_W", (d, d)),
            (pre + "U2_b", (d,)),
        ]
    shapes += [
        ("head1_W", (3 * d, d)),
        ("head1_b", (d,)),
        ("head2_W", (d, 1)),
        ("head2_b", (1,)),
    ]
    return shapes


def init_model(cfg: ModelConfig, edge_dim: int, train_graphs=()) -> GnnModel:
    """Seeded Glorot-uniform weights; feature standardization fitted on the
    training graphs (identity when none are given)."""
    rng = np.random.default_rng(cfg.seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in _param_shapes(cfg, edge_dim):
        if name.endswith("_b"):
            params[name] = np.zeros(shape)
        else:
            fan_in, fan_out = shape
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            params[name] = rng.uniform(-limit, limit, size=shape)
    if train_graphs:
        vstack = np.vstack([g.vertex_feats for g in train_graphs])
        estack = np.vstack([g.edge_feats for g in train_graphs])
        v_mean, v_std = vstack.mean(axis=0), vstack.std(axis=0)
        e_mean, e_std = estack.mean(axis=0), estack.std(axis=0)
    else:
        v_mean, v_std = np.zeros(10), np.ones(10)
        e_mean, e_std = np.zeros(edge_dim), np.ones(edge_dim)
    v_std = np.where(v_std < 1e-8, 1.0, v_std)
    e_std = np.where(e_std < 1e-8, 1.0, e_std)
    return GnnModel(cfg, edge_dim, params, v_mean, v_std, e_mean, e_std)


def model_forward(model: GnnModel, gt: GraphTensors, params=None):
    """Edge probabilities as a Tensor; pass Tensor params to record a tape."""
    if gt.edge_feats.shape[1] != model.edge_dim:
        raise ValueError(
            f"graph has {gt.edge_feats.shape[1]} edge features, model expects {model.edge_dim}"
        )
    p = params if params is not None else {k: ad.const(v) for k, v in model.params.items()}
    xv = (gt.vertex_feats - model.v_mean) / model.v_std
    xe = (gt.edge_feats - model.e_mean) / model.e_std
    h = ad.softplus(ad.add(ad.matmul(ad.const(xv), p["enc_v_W"]), p["enc_v_b"]))
    e = ad.softplus(ad.add(ad.matmul(ad.const(xe), p["enc_e_W"]), p["enc_e_b"]))
    for i, kind in enumerate(model.config.block_kinds()):
        fwd = emulsionconv_forward if kind == "emulsion" else edgeconv_forward
        h = fwd(gt, h, e, p, f"b{i}_", model.config.aggregation)
    return classifier_forward(gt, h, e, p)


def predict_probabilities(model: GnnModel, g: TrackGraph) -> np.ndarray:
    """Per-edge same-shower probabilities for a graph (no tape recorded)."""
    gt = g if isinstance(g, GraphTensors) else GraphTensors(g)
    return model_forward(model, gt).data.reshape(-1)


# ---------------------------------------------------------------------------
# optimization


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update; returns (new_params, state).  State is mutated."""
    if not state:
        state.update(t=0, m={k: np.zeros_like(v) for k, v in params.items()},
                     v={k: np.zeros_like(v) for k, v in params.items()})
    state["t"] += 1
    t = state["t"]
    out = {}
    for k, pv in params.items():
        gv = grads[k]
        state["m"][k] = beta1 * state["m"][k] + (1 - beta1) * gv
        state["v"][k] = beta2 * state["v"][k] + (1 - beta2) * gv * gv
        m_hat = state["m"][k] / (1 - beta1**t)
        v_hat = state["v"][k] / (1 - beta2**t)
        out[k] = pv - lr * m_hat / (np.sqrt(v_hat) + eps)
    return out, state


def roc_auc(scores, labels) -> float:
    """Ranking quality: P(score_pos > score_neg) with ties counted 1/2.

    Exactly equals the pairwise indicator sum normalized by n_pos * n_neg.
    """
    scores = np.asarray(scores, dtype=float).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClassError("ROC-AUC needs both classes present")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=float)
    sorted_scores = scores[order]
    i = 0
    rank_pos = 1
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        avg = 0.5 * (rank_pos + rank_pos + (j - i))
        ranks[order[i : j + 1]] = avg
        rank_pos += j - i + 1
        i = j + 1
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


# ---------------------------------------------------------------------------
# training


def graph_loss(model: GnnModel, gt: GraphTensors, gamma: float):
    """Focal loss on one labeled graph with a recording tape; returns
    (loss tensor, param tensors)."""
    tparams = {k: ad.param(v) for k, v in model.params.items()}
    probs = model_forward(model, gt, tparams)
    loss = focal_loss(probs, gt.labels, gamma)
    return loss, tparams


def train(train_graphs, val_graphs, model_cfg: ModelConfig, train_cfg: TrainConfig):
    """Full-batch-per-graph training with early stopping on validation AUC.

    Returns (model, history); history rows are (epoch, train_loss, val_auc).
    The returned model carries the best-validation parameters.
    """
    train_graphs = [g for g in train_graphs]
    val_graphs = [g for g in val_graphs]
    if not train_graphs or not val_graphs:
        raise ValueError("train and validation splits must both be non-empty")
    for g in train_graphs + val_graphs:
        if g.labels is None:
            raise ValueError("all training/validation graphs need edge labels")
    gts = [GraphTensors(g) for g in train_graphs]
    vts = [GraphTensors(g) for g in val_graphs]
    edge_dim = gts[0].edge_feats.shape[1]
    model = init_model(model_cfg, edge_dim, train_graphs)
    state: dict = {}
    history: list[tuple[int, float, float]] = []
    best_auc = -np.inf
    best_val_loss = np.inf
    best_params = {k: v.copy() for k, v in model.params.items()}
    since_improve = 0
    for epoch in range(1, train_cfg.max_epochs + 1):
        losses = []
        for gt in gts:
            if len(gt.src) == 0:
                continue
            loss, tparams = graph_loss(model, gt, train_cfg.gamma_focal)
            ad.backward(loss)
            grads = {k: t.grad if t.grad is not None else np.zeros_like(t.data) for k, t in tparams.items()}
            model.params, state = adam_step(model.params, grads, state, train_cfg.lr)
            losses.append(float(loss.data))
        val_probs = [model_forward(model, vt) for vt in vts]
        val_scores = np.concatenate([p.data.reshape(-1) for p in val_probs])
        val_labels = np.concatenate([vt.labels for vt in vts])
        auc = roc_auc(val_scores, val_labels)
        val_loss = float(
            np.mean([float(focal_loss(p, vt.labels, train_cfg.gamma_focal).data)
                     for p, vt in zip(val_probs, vts)])
        )
        history.append((epoch, float(np.mean(losses)) if losses else 0.0, auc))
        # AUC compared at AUC_MIN_DELTA granularity: sub-noise wiggles are not
        # improvements.  Patience counts epochs without a (quantized) AUC gain;
        # among plateau epochs the checkpoint keeps the lowest validation loss,
        # so probability calibration keeps improving after ranking saturates.
        auc_q = round(auc / AUC_MIN_DELTA) * AUC_MIN_DELTA
        improved_auc = auc_q > best_auc
        if improved_auc or (auc_q == best_auc and val_loss < best_val_loss):
            best_auc = auc_q
            best_val_loss = val_loss
            best_params = {k: v.copy() for k, v in model.params.items()}
        if improved_auc:
            since_improve = 0
        else:
            since_improve += 1
            if since_improve >= train_cfg.patience:
                break
    model.params = best_params
    return model, history


# ---------------------------------------------------------------------------
# serialization


def save_model(model: GnnModel, path) -> None:
    doc = {
        "format_version": MODEL_FORMAT_VERSION,
        "config": asdict(model.config),
        "edge_dim": model.edge_dim,
        "normalization": {
            "v_mean": model.v_mean.tolist(),
            "v_std": model.v_std.tolist(),
            "e_mean": model.e_mean.tolist(),
            "e_std": model.e_std.tolist(),
        },
        "params": {
            k: {"shape": list(v.shape), "data": v.reshape(-1).tolist()}
            for k, v in sorted(model.params.items())
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load_model(path) -> GnnModel:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    version = doc.get("format_version")
    if version != MODEL_FORMAT_VERSION:
        raise ModelFormatError(
            f"unsupported model format version {version!r}, expected {MODEL_FORMAT_VERSION}"
        )
    cfg = ModelConfig(**doc["config"])
    params = {
        k: np.array(spec["data"], dtype=float).reshape(spec["shape"])
        for k, spec in doc["params"].items()
    }
    norm = doc["normalization"]
    return GnnModel(
        config=cfg,
        edge_dim=int(doc["edge_dim"]),
        params=params,
        v_mean=np.array(norm["v_mean"], dtype=float),
        v_std=np.array(norm["v_std"], dtype=float),
        e_mean=np.array(norm["e_mean"], dtype=float),
        e_std=np.array(norm["e_std"], dtype=float),
    )


class GnnEdgeClassifier(BaseEstimator):
    """sklearn-style wrapper: fit on labeled graphs, predict edge probabilities."""

    def __init__(
        self,
        d_hidden=32,
        n_emulsion=3,
        n_edge=5,
        block_order="emulsion_first",
        aggregation="mean",
        lr=1e-3,
        max_epochs=5000,
        patience=100,
        gamma_focal=3.0,
        seed=0,
    ):
        self.d_hidden = d_hidden
        self.n_emulsion = n_emulsion
        self.n_edge = n_edge
        self.block_order = block_order
        self.aggregation = aggregation
        self.lr = lr
        self.max_epochs = max_epochs
        self.patience = patience
        self.gamma_focal = gamma_focal
        self.seed = seed

    def fit(self, train_graphs, val_graphs):
        model_cfg = ModelConfig(
            d_hidden=self.d_hidden,
            n_emulsion=self.n_emulsion,
            n_edge=self.n_edge,
            block_order=self.block_order,
            aggregation=self.aggregation,
            seed=self.seed,
        )
        train_cfg = TrainConfig(
            lr=self.lr,
            max_epochs=self.max_epochs,
            patience=self.patience,
            gamma_focal=self.gamma_focal,
            seed=self.seed,
        )
        self.model_, self.history_ = train(train_graphs, val_graphs, model_cfg, train_cfg)
        return self

    def predict_proba(self, graph: TrackGraph) -> np.ndarray:
        return predict_probabilities(self.model_, graph)

    def score(self, graph: TrackGraph) -> float:
        if graph.labels is None:
            raise ValueError("graph has no labels to score against")
        return roc_auc(self.predict_proba(graph), graph.labels)
