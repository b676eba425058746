"""Differentiable ops. Each builds its value with numpy and records a vector-Jacobian product."""

import numpy as np

from .. import kernels
from ..errors import ParameterError, ShapeError

DEFAULT_NEGATIVE_SLOPE = 0.2


def _check_2d(op, *ts):
    for t in ts:
        if t.value.ndim != 2:
            raise ShapeError(f"{op}: expected a 2-D tensor, got shape {t.value.shape}")


def as_groups(groups):
    """Normalize group index lists to CSR form (indptr, indices)."""
    if isinstance(groups, tuple) and len(groups) == 2 and isinstance(groups[0], np.ndarray):
        indptr, indices = groups
    else:
        arr = groups if isinstance(groups, np.ndarray) else None
        if arr is not None and arr.ndim == 2:
            g, k = arr.shape
            indptr = np.arange(g + 1, dtype=np.int64) * k
            indices = arr.reshape(-1)
        else:
            lists = [np.asarray(g, dtype=np.int64).reshape(-1) for g in groups]
            indptr = np.zeros(len(lists) + 1, dtype=np.int64)
            indptr[1:] = np.cumsum([len(x) for x in lists])
            indices = np.concatenate(lists) if lists else np.zeros(0, np.int64)
    indptr = np.ascontiguousarray(indptr, dtype=np.int64)
    indices = np.ascontiguousarray(indices, dtype=np.int64)
    if len(indptr) < 2 or (np.diff(indptr) <= 0).any():
        raise ParameterError("empty group")
    return indptr, indices


def matmul(a, b):
    _check_2d("matmul", a, b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    ga, gb = a.requires_grad, b.requires_grad
    return a.graph.record("matmul", (a, b), av @ bv,
                          lambda g: (g @ bv.T if ga else None, av.T @ g if gb else None))


def _broadcast_pair(op, a, b):
    if a.shape == b.shape:
        return False
    if b.value.ndim == 1 and a.value.ndim == 2 and b.shape[0] == a.shape[1]:
        return True
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def add(a, b):
    """a + b; ``b`` may be a row vector broadcast over the rows of ``a`` (bias add)."""
    rows = _broadcast_pair("add", a, b)
    red = (lambda g: g.sum(axis=0)) if rows else (lambda g: g)
    return a.graph.record("add", (a, b), a.value + b.value, lambda g: (g, red(g)))


def subtract(a, b):
    rows = _broadcast_pair("subtract", a, b)
    red = (lambda g: -g.sum(axis=0)) if rows else (lambda g: -g)
    return a.graph.record("subtract", (a, b), a.value - b.value, lambda g: (g, red(g)))


def mul(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.value, b.value
    return a.graph.record("mul", (a, b), av * bv, lambda g: (g * bv, g * av))


def scale(a, c):
    c = float(c)
    return a.graph.record("scale", (a,), a.value * c, lambda g: (g * c,))


def divide(a, s):
    """a / s for a scalar tensor s."""
    if s.value.size != 1:
        raise ShapeError(f"divide: denominator must be scalar, got {s.shape}")
    sv = float(s.value.reshape(()))
    out = a.value / sv
    return a.graph.record("divide", (a, s), out,
                          lambda g: (g / sv, np.reshape(-(g * out).sum() / sv, s.shape)))


def transpose(a):
    _check_2d("transpose", a)
    return a.graph.record("transpose", (a,), a.value.T, lambda g: (g.T,))


def reshape(a, shape):
    old = a.shape
    return a.graph.record("reshape", (a,), a.value.reshape(shape), lambda g: (g.reshape(old),))


def concat(tensors, axis=1):
    tensors = list(tensors)
    vals = [t.value for t in tensors]
    try:
        out = np.concatenate(vals, axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    cuts = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return tensors[0].graph.record("concat", tensors, out, lambda g: tuple(np.split(g, cuts, axis=axis)))


def leaky_relu(a, negative_slope=DEFAULT_NEGATIVE_SLOPE):
    slope = np.where(a.value > 0, 1.0, negative_slope)
    return a.graph.record("leaky_relu", (a,), a.value * slope, lambda g: (g * slope,))


def exp(a):
    out = np.exp(a.value)
    return a.graph.record("exp", (a,), out, lambda g: (g * out,))


def log(a, floor=0.0):
    """Natural log with inputs clamped below at ``floor`` (zero gradient where clamped)."""
    x = a.value
    clamped = np.maximum(x, floor) if floor > 0 else x
    live = x >= floor if floor > 0 else np.ones(x.shape, bool)
    return a.graph.record("log", (a,), np.log(clamped), lambda g: (np.where(live, g / clamped, 0.0),))


def reduce_sum(a, axis=None):
    out = a.value.sum(axis=axis)
    shape = a.shape

    def vjp(g):
        if axis is None:
            return (np.full(shape, float(np.asarray(g).reshape(()))),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)
    return a.graph.record("reduce_sum", (a,), out, vjp)


def reduce_mean(a, axis=None):
    n = a.value.size if axis is None else a.shape[axis]
    if n == 0:
        raise ParameterError("reduce_mean over an empty axis")
    return scale(reduce_sum(a, axis), 1.0 / n)


def sum_of_squares(a):
    x = a.value
    return a.graph.record("sum_of_squares", (a,), np.sum(x * x), lambda g: (2.0 * float(g) * x,))


def gather_rows(a, idx):
    idx = np.asarray(idx, dtype=np.int64).reshape(-1)
    n = a.shape[0]
    if len(idx) and (idx.min() < 0 or idx.max() >= n):
        raise ParameterError("gather_rows: index out of range")
    if a.value.ndim == 1:
        return a.graph.record("gather_rows", (a,), a.value[idx],
                              lambda g: (np.bincount(idx, weights=g, minlength=n),))
    return a.graph.record("gather_rows", (a,), a.value[idx], lambda g: (kernels.scatter_rows(g, idx, n),))


def reduce_max_over_group(a, groups):
    """Column-wise max over row groups; ties and gradients go to the lowest row index.

    The argmax rows are kept on ``out.aux``.
    """
    _check_2d("reduce_max_over_group", a)
    indptr, indices = as_groups(groups)
    if indices.min() < 0 or indices.max() >= a.shape[0]:
        raise ParameterError("reduce_max_over_group: index out of range")
    out, arg = kernels.group_max(a.value, indptr, indices)
    n = a.shape[0]
    t = a.graph.record("reduce_max_over_group", (a,), out, lambda g: (kernels.scatter_cols(g, arg, n),))
    t.aux = arg
    return t


def reduce_mean_over_group(a, groups):
    """Row means over groups of row indices."""
    _check_2d("reduce_mean_over_group", a)
    indptr, indices = as_groups(groups)
    counts = np.diff(indptr).astype(np.float64)
    seg = np.repeat(np.arange(len(counts)), np.diff(indptr))
    sums = np.zeros((len(counts), a.shape[1]))
    np.add.at(sums, seg, a.value[indices])
    out = sums / counts[:, None]
    n = a.shape[0]

    def vjp(g):
        return (kernels.scatter_rows(np.repeat(g / counts[:, None], np.diff(indptr), axis=0), indices, n),)
    return a.graph.record("reduce_mean_over_group", (a,), out, vjp)


def softmax_rows(a):
    _check_2d("softmax_rows", a)
    z = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    return a.graph.record("softmax_rows", (a,), p, lambda g: (p * (g - (g * p).sum(axis=1, keepdims=True)),))


def normalize_rows(a):
    """Scale each row to unit Euclidean length; zero rows stay zero."""
    _check_2d("normalize_rows", a)
    x = a.value
    norm = np.sqrt((x * x).sum(axis=1, keepdims=True))
    safe = np.where(norm > 0, norm, 1.0)
    y = np.where(norm > 0, x / safe, 0.0)

    def vjp(g):
        return (np.where(norm > 0, (g - y * (g * y).sum(axis=1, keepdims=True)) / safe, 0.0),)
    return a.graph.record("normalize_rows", (a,), y, vjp)
