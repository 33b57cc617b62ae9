"""Minimal reverse-mode automatic differentiation on float64 numpy arrays.

Covers exactly the op set the message-passing network needs: dense algebra,
row gather/scatter, contiguous segment reductions, and smooth pointwise
nonlinearities.  Gradients are exact reverse-mode; segment reductions assume
segments are contiguous runs (callers pre-sort edges by destination).
"""

from __future__ import annotations

import numpy as np


class Tensor:
    __slots__ = ("data", "grad", "parents", "bwd", "requires")

    def __init__(self, data, parents=(), bwd=None, requires=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.bwd = bwd
        self.requires = requires or any(p.requires for p in parents)

    @property
    def shape(self):
        return self.data.shape

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
            if self.grad.shape != self.data.shape:
                self.grad = np.broadcast_to(self.grad, self.data.shape).copy()
        else:
            self.grad += g


def param(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires=True)


def const(data) -> Tensor:
    return Tensor(data)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _unbroadcast(g, shape):
    """Sum gradient g down to `shape` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _make(data, parents, bwd):
    out = Tensor(data, parents=parents, bwd=bwd)
    if not out.requires:
        out.bwd = None
        out.parents = ()
    return out


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)

    def bwd(g):
        if a.requires:
            a._accum(_unbroadcast(g, a.data.shape))
        if b.requires:
            b._accum(_unbroadcast(g, b.data.shape))

    return _make(a.data + b.data, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)

    def bwd(g):
        if a.requires:
            a._accum(_unbroadcast(g, a.data.shape))
        if b.requires:
            b._accum(_unbroadcast(-g, b.data.shape))

    return _make(a.data - b.data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)

    def bwd(g):
        if a.requires:
            a._accum(_unbroadcast(g * b.data, a.data.shape))
        if b.requires:
            b._accum(_unbroadcast(g * a.data, b.data.shape))

    return _make(a.data * b.data, (a, b), bwd)


def neg(a) -> Tensor:
    a = _wrap(a)

    def bwd(g):
        if a.requires:
            a._accum(-g)

    return _make(-a.data, (a,), bwd)


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)

    def bwd(g):
        if a.requires:
            a._accum(g @ b.data.T)
        if b.requires:
            b._accum(a.data.T @ g)

    return _make(a.data @ b.data, (a, b), bwd)


def concat(parts, axis=1) -> Tensor:
    parts = [_wrap(p) for p in parts]
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                p._accum(g[tuple(sl)])

    return _make(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), bwd)


def gather_rows(a, idx) -> Tensor:
    a = _wrap(a)
    idx = np.asarray(idx, dtype=np.int64)

    def bwd(g):
        if a.requires:
            ga = np.zeros_like(a.data)
            np.add.at(ga, idx, g)
            a._accum(ga)

    return _make(a.data[idx], (a,), bwd)


def scatter_rows(a, idx, rows) -> Tensor:
    """Copy of `a` with rows at `idx` replaced by `rows` (idx unique)."""
    a, rows = _wrap(a), _wrap(rows)
    idx = np.asarray(idx, dtype=np.int64)
    out = a.data.copy()
    out[idx] = rows.data

    def bwd(g):
        if rows.requires:
            rows._accum(g[idx])
        if a.requires:
            ga = g.copy()
            ga[idx] = 0.0
            a._accum(ga)

    return _make(out, (a, rows), bwd)


def segment_mean(a, starts, counts) -> Tensor:
    """Mean over contiguous row segments; `starts` ascending, segments nonempty."""
    a = _wrap(a)
    counts = np.asarray(counts, dtype=np.int64)
    sums = np.add.reduceat(a.data, starts, axis=0)
    out = sums / counts[:, None]

    def bwd(g):
        if a.requires:
            a._accum(np.repeat(g / counts[:, None], counts, axis=0))

    return _make(out, (a,), bwd)


def segment_max(a, starts, counts) -> Tensor:
    a = _wrap(a)
    starts = np.asarray(starts, dtype=np.int64)
    counts = np.asarray(counts, dtype=np.int64)
    out = np.maximum.reduceat(a.data, starts, axis=0)

    def bwd(g):
        if a.requires:
            ga = np.zeros_like(a.data)
            for si in range(len(starts)):
                sl = slice(starts[si], starts[si] + counts[si])
                am = np.argmax(a.data[sl], axis=0)
                ga[starts[si] + am, np.arange(a.data.shape[1])] += g[si]
            a._accum(ga)

    return _make(out, (a,), bwd)


def softplus(a) -> Tensor:
    a = _wrap(a)
    ez = np.exp(-np.abs(a.data))
    out = np.maximum(a.data, 0.0) + np.log1p(ez)

    def bwd(g):
        if a.requires:
            slope = np.where(a.data >= 0, 1.0 / (1.0 + ez), ez / (1.0 + ez))
            a._accum(g * slope)

    return _make(out, (a,), bwd)


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    ez = np.exp(-np.abs(a.data))
    s = np.where(a.data >= 0, 1.0 / (1.0 + ez), ez / (1.0 + ez))

    def bwd(g):
        if a.requires:
            a._accum(g * s * (1.0 - s))

    return _make(s, (a,), bwd)


def log(a) -> Tensor:
    a = _wrap(a)

    def bwd(g):
        if a.requires:
            a._accum(g / a.data)

    return _make(np.log(a.data), (a,), bwd)


def power(a, exponent: float) -> Tensor:
    a = _wrap(a)

    def bwd(g):
        if a.requires:
            a._accum(g * exponent * a.data ** (exponent - 1.0))

    return _make(a.data**exponent, (a,), bwd)


def clip(a, lo: float, hi: float) -> Tensor:
    a = _wrap(a)
    inside = (a.data > lo) & (a.data < hi)

    def bwd(g):
        if a.requires:
            a._accum(g * inside)

    return _make(np.clip(a.data, lo, hi), (a,), bwd)


def mean_all(a) -> Tensor:
    a = _wrap(a)
    n = a.data.size

    def bwd(g):
        if a.requires:
            a._accum(np.full_like(a.data, float(g) / n))

    return _make(a.data.mean(), (a,), bwd)


def backward(loss: Tensor) -> None:
    """Reverse-accumulate gradients from a scalar loss."""
    if loss.data.ndim != 0:
        raise ValueError("backward expects a scalar loss")
    if not loss.requires:
        raise RuntimeError("loss does not depend on any parameter; nothing recorded")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            stack.append((p, False))
    loss._accum(np.ones_like(loss.data))
    for node in reversed(order):
        if node.bwd is not None and node.grad is not None:
            node.bwd(node.grad)
