"""Small input-validation helpers shared across the package."""

from __future__ import annotations

import numpy as np


def clamp_magnitude(v, eps):
    """Push |v| up to at least eps, preserving sign (zero counts as +)."""
    v = np.asarray(v, dtype=float)
    sign = np.where(v < 0.0, -1.0, 1.0)
    return sign * np.maximum(np.abs(v), eps)


def check_probabilities(p, name="probabilities"):
    p = np.asarray(p, dtype=float)
    if p.ndim != 1:
        raise ValueError(f"{name} must be 1-d, got shape {p.shape}")
    if not np.all(np.isfinite(p)) or np.any(p < 0.0) or np.any(p > 1.0):
        raise ValueError(f"{name} must lie in [0, 1]")
    return p


def check_feature_matrix(X, name="X"):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2:
        raise ValueError(f"{name} must be 2-d, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains non-finite values")
    return X


def check_binary_labels(y, name="y"):
    y = np.asarray(y)
    if y.ndim != 1:
        raise ValueError(f"{name} must be 1-d")
    uniq = set(np.unique(y).tolist())
    if not uniq <= {0, 1}:
        raise ValueError(f"{name} must be binary 0/1, got values {sorted(uniq)}")
    return y.astype(np.int8)
