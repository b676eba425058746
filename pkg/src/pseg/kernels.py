"""Hot numeric kernels with two interchangeable backends.

Each kernel has a numba ``@njit`` implementation and a pure-numpy one.  The
backend is chosen at import time from the ``PSEG_NUMBA`` environment variable
(``0``/``false``/``off`` selects numpy) and can be switched at runtime with
:func:`set_backend`.  Both backends perform the same floating-point operations
in the same order, so their outputs are bit-identical.
"""

import os
import warnings

import numpy as np

try:
    import numba
    from numba import njit, prange

    HAS_NUMBA = True
    # an old system TBB makes numba fall back to another threading layer; nothing to act on
    warnings.filterwarnings("ignore", message="The TBB threading layer", category=numba.NumbaWarning)
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

_FLAG = os.environ.get("PSEG_NUMBA", "1").strip().lower()
BACKEND = "numba" if HAS_NUMBA and _FLAG not in ("0", "false", "off", "no") else "numpy"

# relative bound on the error of the BLAS distance expansion used for candidate filtering
_EXPANSION_RTOL = 1e-9
_ROW_BLOCK = 2048


def set_backend(name):
    global BACKEND
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAS_NUMBA:
        raise RuntimeError("numba is not installed")
    BACKEND = name


def set_threads(n):
    if HAS_NUMBA:
        numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))


def _approx_sqdist(X, rows):
    """Fast (BLAS) squared distances from X[rows] to all of X, plus a per-entry error bound."""
    sq = np.einsum("ij,ij->i", X, X)
    approx = sq[rows, None] + sq[None, :] - 2.0 * (X[rows] @ X.T)
    tol = _EXPANSION_RTOL * (sq[rows, None] + sq.max()) + 1e-300
    return approx, tol


# --------------------------------------------------------------------------- knn

if HAS_NUMBA:

    @njit(parallel=True, cache=True)
    def _knn_block_nb(X, approx, tol, row0, k, exclude_self):
        nb, n = approx.shape
        d = X.shape[1]
        out = np.empty((nb, k), np.int64)
        for r in prange(nb):
            i = row0 + r
            bd = np.full(k, np.inf)
            bi = np.full(k, -1, np.int64)
            cnt = 0
            for j in range(n):
                if exclude_self and j == i:
                    continue
                if cnt == k and approx[r, j] > bd[k - 1] + 2.0 * tol[r]:
                    continue
                s = 0.0
                for c in range(d):
                    t = X[i, c] - X[j, c]
                    s += t * t
                if cnt < k:
                    p = cnt
                    cnt += 1
                elif s < bd[k - 1]:
                    p = k - 1
                else:
                    continue
                while p > 0 and bd[p - 1] > s:
                    bd[p] = bd[p - 1]
                    bi[p] = bi[p - 1]
                    p -= 1
                bd[p] = s
                bi[p] = j
            for q in range(k):
                out[r, q] = bi[q]
        return out


def _exact_sqdist_np(X, i, cand):
    diff = X[cand] - X[i]
    s = np.zeros(len(cand))
    for c in range(X.shape[1]):
        s += diff[:, c] * diff[:, c]
    return s


def _knn_block_np(X, approx, tol, row0, k, exclude_self):
    nb, n = approx.shape
    out = np.empty((nb, k), np.int64)
    if exclude_self:
        approx = approx.copy()
        approx[np.arange(nb), row0 + np.arange(nb)] = np.inf
    kth = np.partition(approx, k - 1, axis=1)[:, k - 1]
    for r in range(nb):
        i = row0 + r
        cand = np.flatnonzero(approx[r] <= kth[r] + 2.0 * tol[r, 0])
        if exclude_self:
            cand = cand[cand != i]
        s = _exact_sqdist_np(X, i, cand)
        order = np.lexsort((cand, s))
        out[r] = cand[order[:k]]
    return out


def knn(X, k, exclude_self=False):
    """Exact k nearest neighbours by squared Euclidean distance, ties to the lower index."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    n = X.shape[0]
    out = np.empty((n, k), np.int64)
    for row0 in range(0, n, _ROW_BLOCK):
        rows = np.arange(row0, min(n, row0 + _ROW_BLOCK))
        approx, tol = _approx_sqdist(X, rows)
        if BACKEND == "numba":
            # tol only depends on the row; pass a 1-D view for the kernel
            out[rows] = _knn_block_nb(X, approx, np.ascontiguousarray(tol[:, 0]), row0, k, exclude_self)
        else:
            out[rows] = _knn_block_np(X, approx, tol, row0, k, exclude_self)
    return out


# --------------------------------------------------------------------------- fps

if HAS_NUMBA:

    @njit(cache=True)
    def _fps_nb(X, m, start):
        n, d = X.shape
        mind = np.full(n, np.inf)
        chosen = np.zeros(n, np.bool_)
        out = np.empty(m, np.int64)
        out[0] = start
        chosen[start] = True
        cur = start
        for t in range(1, m):
            best = -1
            bestd = -1.0
            for j in range(n):
                if chosen[j]:
                    continue
                s = 0.0
                for c in range(d):
                    u = X[cur, c] - X[j, c]
                    s += u * u
                if s < mind[j]:
                    mind[j] = s
                if mind[j] > bestd:
                    bestd = mind[j]
                    best = j
            out[t] = best
            chosen[best] = True
            cur = best
        return out


def _fps_np(X, m, start):
    n, d = X.shape
    mind = np.full(n, np.inf)
    chosen = np.zeros(n, bool)
    out = np.empty(m, np.int64)
    out[0] = start
    chosen[start] = True
    cur = start
    for t in range(1, m):
        diff = X[cur] - X
        s = np.zeros(n)
        for c in range(d):
            s += diff[:, c] * diff[:, c]
        np.minimum(mind, s, out=mind)
        best = int(np.argmax(np.where(chosen, -1.0, mind)))
        out[t] = best
        chosen[best] = True
        cur = best
    return out


def fps(X, m, start=0):
    X = np.ascontiguousarray(X, dtype=np.float64)
    if BACKEND == "numba":
        return _fps_nb(X, int(m), int(start))
    return _fps_np(X, int(m), int(start))


# --------------------------------------------------------------------- group max

if HAS_NUMBA:

    @njit(parallel=True, cache=True)
    def _group_max_nb(X, indptr, indices):
        g = indptr.shape[0] - 1
        d = X.shape[1]
        out = np.empty((g, d))
        arg = np.empty((g, d), np.int64)
        for r in prange(g):
            a = indptr[r]
            j0 = indices[a]
            for c in range(d):
                out[r, c] = X[j0, c]
                arg[r, c] = j0
            for p in range(a + 1, indptr[r + 1]):
                j = indices[p]
                for c in range(d):
                    v = X[j, c]
                    if v > out[r, c] or (v == out[r, c] and j < arg[r, c]):
                        out[r, c] = v
                        arg[r, c] = j
        return out, arg

    @njit(cache=True)
    def _scatter_cols_nb(grad, arg, nrows):
        g, d = grad.shape
        out = np.zeros((nrows, d))
        for r in range(g):
            for c in range(d):
                out[arg[r, c], c] += grad[r, c]
        return out

    @njit(cache=True)
    def _scatter_rows_nb(grad, idx, nrows):
        out = np.zeros((nrows, grad.shape[1]))
        for r in range(grad.shape[0]):
            j = idx[r]
            for c in range(grad.shape[1]):
                out[j, c] += grad[r, c]
        return out


def _group_max_np(X, indptr, indices):
    V = X[indices]
    starts = indptr[:-1]
    out = np.maximum.reduceat(V, starts, axis=0)
    counts = np.diff(indptr)
    hit = V == np.repeat(out, counts, axis=0)
    cand = np.where(hit, indices[:, None], np.iinfo(np.int64).max)
    arg = np.minimum.reduceat(cand, starts, axis=0)
    return out, arg


def group_max(X, indptr, indices):
    """Column-wise max of X over row groups given in CSR form; returns (max, argmax rows)."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    if BACKEND == "numba":
        return _group_max_nb(X, indptr, indices)
    return _group_max_np(X, indptr, indices)


def scatter_cols(grad, arg, nrows):
    """Adjoint of group_max: out[arg[r, c], c] += grad[r, c]."""
    grad = np.ascontiguousarray(grad, dtype=np.float64)
    if BACKEND == "numba":
        return _scatter_cols_nb(grad, arg, nrows)
    d = grad.shape[1]
    flat = (arg * d + np.arange(d)).ravel()
    return np.bincount(flat, weights=grad.ravel(), minlength=nrows * d).reshape(nrows, d)


def scatter_rows(grad, idx, nrows):
    """Adjoint of row gathering: out[idx[r]] += grad[r]."""
    grad = np.ascontiguousarray(grad, dtype=np.float64)
    if BACKEND == "numba":
        return _scatter_rows_nb(grad, np.ascontiguousarray(idx, dtype=np.int64), nrows)
    out = np.zeros((nrows, grad.shape[1]))
    np.add.at(out, idx, grad)
    return out
