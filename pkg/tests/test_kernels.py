"""The numba and numpy backends must agree bit for bit."""

import numpy as np
import pytest

from pseg import kernels
from pseg.diffcore.ops import as_groups

pytestmark = pytest.mark.skipif(not kernels.HAS_NUMBA, reason="numba not installed")


def both(fn, *args):
    old = kernels.BACKEND
    try:
        kernels.set_backend("numba")
        a = fn(*args)
        kernels.set_backend("numpy")
        b = fn(*args)
    finally:
        kernels.set_backend(old)
    return a, b


@pytest.mark.parametrize("n,d,k", [(30, 3, 5), (300, 16, 10), (2100, 4, 8)])
def test_knn_backends_identical(n, d, k):
    X = np.random.default_rng(n).normal(size=(n, d))
    for excl in (False, True):
        a, b = both(kernels.knn, X, k, excl)
        np.testing.assert_array_equal(a, b)


def test_knn_near_ties_resolved_exactly():
    # distances differing in the last bits: the BLAS expansion cannot order them, the exact pass must
    X = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0 + 2e-16], [1e-8, 1.0]])
    a, b = both(kernels.knn, X, 3, True)
    np.testing.assert_array_equal(a, b)
    assert a[0].tolist() == [1, 3, 2]


def test_fps_backends_identical():
    X = np.random.default_rng(0).normal(size=(500, 8))
    a, b = both(kernels.fps, X, 40, 3)
    np.testing.assert_array_equal(a, b)


def test_group_max_and_scatter_backends_identical():
    rng = np.random.default_rng(1)
    X = rng.integers(0, 4, size=(40, 5)).astype(float)  # many ties
    indptr, indices = as_groups(rng.integers(0, 40, size=(40, 6)))
    (va, aa), (vb, ab) = both(kernels.group_max, X, indptr, indices)
    np.testing.assert_array_equal(va, vb)
    np.testing.assert_array_equal(aa, ab)
    G = rng.normal(size=va.shape)
    a, b = both(kernels.scatter_cols, G, aa, 40)
    np.testing.assert_array_equal(a, b)
    idx = rng.integers(0, 40, size=70)
    a, b = both(kernels.scatter_rows, rng.normal(size=(70, 3)), idx, 40)
    np.testing.assert_array_equal(a, b)


def test_set_backend_rejects_unknown():
    with pytest.raises(ValueError):
        kernels.set_backend("cuda")
