"""Post-clustering reconstruction quality: shower outcome taxonomy, axis
estimation, energy regression, cluster-quality classification, bootstrap.

A truth shower ends up in exactly one of four categories, applied in this
order of precedence:

* broken    - largest/second-largest holding cluster ratio below 2,
* lost      - clusters together hold under 10% of the shower's tracks,
* recovered - one cluster holds over 90% of them,
* stuck     - anything else (typically merged with another shower).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats as sstats
from scipy.special import boxcox as _boxcox_apply
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin

from .tracks import UNLABELED
from .validation import check_binary_labels, check_feature_matrix

CATEGORIES = ("recovered", "broken", "stuck", "lost")


class SingleClassError(ValueError):
    pass


@dataclass(frozen=True)
class ShowerOutcome:
    shower_id: int
    category: str
    matched_cluster_id: int | None


def categorize_showers(truths, labels_by_track: dict) -> list[ShowerOutcome]:
    """Classify every truth shower from the per-track cluster labels.

    ``labels_by_track`` maps track_id -> cluster label (-1 = noise) and must
    cover every track of every shower.
    """
    outcomes = []
    for truth in truths:
        n = len(truth.track_ids)
        if n == 0:
            raise ValueError(f"shower {truth.shower_id} has no tracks")
        counts: dict[int, int] = {}
        for tid in truth.track_ids:
            if tid not in labels_by_track:
                raise ValueError(f"track {tid} of shower {truth.shower_id} has no cluster label")
            lab = labels_by_track[tid]
            if lab != UNLABELED:
                counts[lab] = counts.get(lab, 0) + 1
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        largest = ranked[0][1] if ranked else 0
        second = ranked[1][1] if len(ranked) > 1 else 0
        matched = ranked[0][0] if ranked else None
        ratio = largest / second if second > 0 else math.inf
        if ratio < 2.0:
            cat = "broken"
        elif sum(counts.values()) < 0.10 * n:
            cat = "lost"
        elif largest > 0.90 * n:
            cat = "recovered"
        else:
            cat = "stuck"
        outcomes.append(ShowerOutcome(truth.shower_id, cat, matched))
    return outcomes


def category_fractions(outcomes) -> dict[str, float]:
    n = len(outcomes)
    return {cat: sum(o.category == cat for o in outcomes) / n * 100.0 for cat in CATEGORIES}


def estimate_axis(tracks):
    """Robust origin/direction estimate for one cluster of tracks.

    z is the earliest plane; (x, y) the median position on that plane;
    (tx, ty) the median slopes of the 10 earliest tracks.
    """
    if not tracks:
        raise ValueError("cannot estimate the axis of an empty cluster")
    z0 = min(t.z for t in tracks)
    first_plane = [t for t in tracks if abs(t.z - z0) <= 1e-6]
    earliest = sorted(tracks, key=lambda t: (t.z, t.track_id))[:10]
    return (
        float(np.median([t.x for t in first_plane])),
        float(np.median([t.y for t in first_plane])),
        float(z0),
        float(np.median([t.tx for t in earliest])),
        float(np.median([t.ty for t in earliest])),
    )


def mae_metric(values) -> float:
    """Mean absolute deviation about the sample median."""
    values = np.asarray(values, dtype=float)
    if values.size < 1:
        raise ValueError("mae_metric needs at least one value")
    return float(np.mean(np.abs(values - np.median(values))))


def energy_resolution(e_true, e_rec) -> float:
    """Sample standard deviation of (E_true - E_rec) / E_true."""
    e_true = np.asarray(e_true, dtype=float)
    e_rec = np.asarray(e_rec, dtype=float)
    if np.any(e_true <= 0):
        raise ValueError("true energies must be positive")
    ratios = (e_true - e_rec) / e_true
    if ratios.size < 2:
        return 0.0
    return float(np.std(ratios, ddof=1))


# ---------------------------------------------------------------------------
# robust energy regression


def huber_irls(X, y, delta=1.35, max_iter=200, tol=1e-12):
    """Affine fit under Huber loss via iteratively reweighted least squares.

    ``delta`` is in the units of the residuals: points with |r| <= delta get
    full weight, larger residuals are downweighted by delta/|r|.  Returns
    (intercept, coefficients).
    """
    X = check_feature_matrix(X)
    y = np.asarray(y, dtype=float)
    A = np.column_stack([np.ones(len(y)), X])
    beta, *_ = np.linalg.lstsq(A, y, rcond=None)
    for _ in range(max_iter):
        r = y - A @ beta
        absr = np.abs(r)
        w = np.where(absr <= delta, 1.0, delta / np.maximum(absr, 1e-300))
        sw = np.sqrt(w)
        new_beta, *_ = np.linalg.lstsq(A * sw[:, None], y * sw, rcond=None)
        if np.max(np.abs(new_beta - beta)) < tol:
            beta = new_beta
            break
        beta = new_beta
    return float(beta[0]), beta[1:]


class HuberEnergyRegressor(BaseEstimator, RegressorMixin):
    """Energy model: per-feature power transform + rank-smoothed quantile
    map to [0, 1], then a robust affine fit of the (standardized) target.

    The quantile map is a kernel-smoothed empirical CDF: the raw value is
    first mapped to its interpolated rank u, then averaged through a box
    kernel of width ``quantile_window`` in rank space.
    """

    def __init__(self, delta=1.35, quantile_window=0.21, max_iter=200, tol=1e-12):
        self.delta = delta
        self.quantile_window = quantile_window
        self.max_iter = max_iter
        self.tol = tol

    def _smooth_rank(self, u, n):
        grid = (np.arange(n) + 0.5) / n
        h = self.quantile_window
        return np.clip((u[:, None] - grid[None, :]) / h + 0.5, 0.0, 1.0).mean(axis=1)

    def transform_features(self, X):
        X = check_feature_matrix(X)
        out = np.empty_like(X)
        for j in range(X.shape[1]):
            t = _boxcox_apply(X[:, j] + self.shifts_[j], self.lambdas_[j])
            u = np.interp(t, self.sorted_t_[j], (np.arange(len(self.sorted_t_[j])) + 0.5) / len(self.sorted_t_[j]))
            out[:, j] = self._smooth_rank(u, len(self.sorted_t_[j]))
        return out

    def fit(self, X, y):
        X = check_feature_matrix(X)
        y = np.asarray(y, dtype=float)
        if len(y) < 10:
            raise ValueError("need at least 10 samples to fit the energy model")
        self.shifts_ = []
        self.lambdas_ = []
        self.sorted_t_ = []
        for j in range(X.shape[1]):
            col = X[:, j]
            if np.ptp(col) == 0:
                raise ValueError(f"degenerate feature {j}: zero variance")
            shift = 1.0 - col.min() if col.min() < 1.0 else 0.0
            transformed, lam = sstats.boxcox(col + shift)
            self.shifts_.append(shift)
            self.lambdas_.append(float(lam))
            self.sorted_t_.append(np.sort(transformed))
        self.y_mean_ = float(y.mean())
        self.y_scale_ = float(y.std()) or 1.0
        T = self.transform_features(X)
        icept, coef = huber_irls(T, (y - self.y_mean_) / self.y_scale_, self.delta, self.max_iter, self.tol)
        self.intercept_ = icept
        self.coef_ = coef
        return self

    def predict(self, X):
        T = self.transform_features(X)
        return self.y_mean_ + self.y_scale_ * (self.intercept_ + T @ self.coef_)


def fit_energy(features, e_true, **kwargs) -> HuberEnergyRegressor:
    return HuberEnergyRegressor(**kwargs).fit(features, e_true)


# ---------------------------------------------------------------------------
# cluster-quality classification


class StumpBoostClassifier(BaseEstimator, ClassifierMixin):
    """Gradient-boosted decision stumps on logistic loss.

    Each round fits a depth-1 tree to the current gradient with Newton leaf
    values; the accumulated score is squashed through a logistic to give
    calibrated probabilities.
    """

    def __init__(self, n_stumps=100, learning_rate=0.1):
        self.n_stumps = n_stumps
        self.learning_rate = learning_rate

    def fit(self, X, y):
        X = check_feature_matrix(X)
        y = check_binary_labels(y).astype(float)
        if y.min() == y.max():
            raise SingleClassError("training labels contain a single class")
        p0 = np.clip(y.mean(), 1e-6, 1 - 1e-6)
        self.base_score_ = float(np.log(p0 / (1 - p0)))
        F = np.full(len(y), self.base_score_)
        self.stumps_ = []
        lam = 1e-6
        for _ in range(self.n_stumps):
            p = 1.0 / (1.0 + np.exp(-F))
            g = y - p
            h = p * (1.0 - p)
            best = None
            for j in range(X.shape[1]):
                order = np.argsort(X[:, j], kind="mergesort")
                xs = X[order, j]
                gs = np.cumsum(g[order])
                hs = np.cumsum(h[order])
                gtot, htot = gs[-1], hs[-1]
                cut = np.flatnonzero(np.diff(xs) > 0)
                if len(cut) == 0:
                    continue
                gl, hl = gs[cut], hs[cut]
                gr, hr = gtot - gl, htot - hl
                gain = gl**2 / (hl + lam) + gr**2 / (hr + lam)
                b = int(np.argmax(gain))
                if best is None or gain[b] > best[0]:
                    thr = 0.5 * (xs[cut[b]] + xs[cut[b] + 1])
                    best = (float(gain[b]), j, thr, float(gl[b] / (hl[b] + lam)), float(gr[b] / (hr[b] + lam)))
            if best is None:
                break
            _, j, thr, left_val, right_val = best
            self.stumps_.append((j, thr, left_val, right_val))
            F += self.learning_rate * np.where(X[:, j] <= thr, left_val, right_val)
        return self

    def decision_function(self, X):
        X = check_feature_matrix(X)
        F = np.full(len(X), self.base_score_)
        for j, thr, lv, rv in self.stumps_:
            F += self.learning_rate * np.where(X[:, j] <= thr, lv, rv)
        return F

    def predict_proba(self, X):
        p1 = 1.0 / (1.0 + np.exp(-self.decision_function(X)))
        return np.column_stack([1.0 - p1, p1])

    def predict(self, X):
        return (self.decision_function(X) > 0).astype(int)


def tpr_fpr_precision(tp: int, fn: int, fp: int, tn: int):
    """Confusion-matrix rates: true-positive rate, false-positive rate,
    precision."""
    tpr = tp / (tp + fn) if tp + fn else 0.0
    fpr = fp / (tn + fp) if tn + fp else 0.0
    precision = tp / (tp + fp) if tp + fp else 1.0
    return tpr, fpr, precision


def roc_curve_points(scores, labels):
    """(thresholds, fpr, tpr) at every distinct score, descending."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    order = np.argsort(-scores, kind="mergesort")
    s, yl = scores[order], labels[order]
    n_pos = int((labels == 1).sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClassError("ROC curve needs both classes")
    tps = np.cumsum(yl == 1)
    fps = np.cumsum(yl == 0)
    last = np.concatenate([np.flatnonzero(np.diff(s) != 0), [len(s) - 1]])
    thresholds = s[last]
    tpr = tps[last] / n_pos
    fpr = fps[last] / n_neg
    return thresholds, np.concatenate([[0.0], fpr]), np.concatenate([[0.0], tpr])


def pr_curve_points(scores, labels):
    """(thresholds, recall, precision) at every distinct score, descending."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    order = np.argsort(-scores, kind="mergesort")
    s, yl = scores[order], labels[order]
    n_pos = int((labels == 1).sum())
    if n_pos == 0 or n_pos == len(labels):
        raise SingleClassError("precision-recall curve needs both classes")
    tps = np.cumsum(yl == 1)
    fps = np.cumsum(yl == 0)
    last = np.concatenate([np.flatnonzero(np.diff(s) != 0), [len(s) - 1]])
    recall = tps[last] / n_pos
    precision = tps[last] / (tps[last] + fps[last])
    return s[last], recall, precision


def average_precision(scores, labels) -> float:
    _, recall, precision = pr_curve_points(scores, labels)
    r_prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - r_prev) * precision))


def cross_validated_quality(X, y, n_folds=3, seed=0, **clf_kwargs):
    """k-fold AUC / average precision of the stump booster.

    Returns a dict with per-fold and mean/std summaries plus pooled ROC and
    PR curve points from out-of-fold scores.
    """
    from .gnn import roc_auc  # pairwise-exact AUC shared with the edge classifier

    X = check_feature_matrix(X)
    y = check_binary_labels(y)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(y))
    folds = np.array_split(order, n_folds)
    aucs, aps = [], []
    oof_scores = np.zeros(len(y))
    for i in range(n_folds):
        test_idx = folds[i]
        train_idx = np.concatenate([folds[j] for j in range(n_folds) if j != i])
        if len(set(y[train_idx].tolist())) < 2 or len(set(y[test_idx].tolist())) < 2:
            continue
        clf = StumpBoostClassifier(**clf_kwargs).fit(X[train_idx], y[train_idx])
        scores = clf.predict_proba(X[test_idx])[:, 1]
        oof_scores[test_idx] = scores
        aucs.append(roc_auc(scores, y[test_idx]))
        aps.append(average_precision(scores, y[test_idx]))
    result = {
        "fold_auc": aucs,
        "fold_ap": aps,
        "auc_mean": float(np.mean(aucs)) if aucs else None,
        "auc_std": float(np.std(aucs, ddof=1)) if len(aucs) > 1 else 0.0,
        "ap_mean": float(np.mean(aps)) if aps else None,
        "ap_std": float(np.std(aps, ddof=1)) if len(aps) > 1 else 0.0,
    }
    if aucs:
        thr, fpr, tpr = roc_curve_points(oof_scores, y)
        thr2, recall, precision = pr_curve_points(oof_scores, y)
        result["roc"] = {"thresholds": thr.tolist(), "fpr": fpr.tolist(), "tpr": tpr.tolist()}
        result["pr"] = {"thresholds": thr2.tolist(), "recall": recall.tolist(), "precision": precision.tolist()}
    return result


def bootstrap_ci(metric_fn, data, n_resamples=1000, seed=0):
    """Resample rows with replacement; return (mean, std) of the metric.

    ``data`` is one array or a tuple of same-length arrays resampled
    jointly.  Each resample draws from its own spawned RNG stream, so the
    result is independent of evaluation order.
    """
    arrays = data if isinstance(data, tuple) else (np.asarray(data),)
    arrays = tuple(np.asarray(a) for a in arrays)
    n = len(arrays[0])
    if n == 0:
        raise ValueError("bootstrap needs non-empty data")
    streams = np.random.SeedSequence(seed).spawn(n_resamples)
    vals = np.empty(n_resamples)
    for i, ss in enumerate(streams):
        idx = np.random.default_rng(ss).integers(0, n, size=n)
        sampled = tuple(a[idx] for a in arrays)
        vals[i] = metric_fn(*sampled) if isinstance(data, tuple) else metric_fn(sampled[0])
    return float(vals.mean()), float(vals.std(ddof=1))


# ---------------------------------------------------------------------------
# cluster summary features for the quality classifier


def cluster_summaries(g, labels=None):
    """Per-cluster feature rows for the quality classifier.

    Features: track count, z extent, mean internal edge probability, slope
    spread (mean absolute deviation of tx and ty about their medians).
    Returns (cluster_ids, X).
    """
    labels = g.cluster_labels if labels is None else np.asarray(labels)
    if labels is None:
        raise ValueError("graph carries no cluster labels")
    z = g.vertex_feats[:, 2]
    tx = g.vertex_feats[:, 3]
    ty = g.vertex_feats[:, 4]
    ids = sorted(int(c) for c in np.unique(labels) if c != UNLABELED)
    rows = []
    for cid in ids:
        mask = labels == cid
        size = int(mask.sum())
        extent = float(z[mask].max() - z[mask].min())
        internal = mask[g.src] & mask[g.dst]
        mean_p = float(g.probabilities[internal].mean()) if g.probabilities is not None and internal.any() else 0.0
        spread = 0.5 * (mae_metric(tx[mask]) + mae_metric(ty[mask]))
        rows.append([size, extent, mean_p, spread])
    return ids, np.array(rows, dtype=float).reshape(-1, 4)
