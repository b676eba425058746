import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import brute_fps, brute_knn, sqdist
from pseg.errors import ParameterError, ShapeError
from pseg.geom import (CAD_CLASSES, ClassAlphabet, LabeledPointCloud, PointCloud, fps, knn, normalize_cloud,
                       random_subsample)


def test_knn_line_example(backend):
    X = np.array([[0.0], [1.0], [3.0]])
    assert knn(X, 1, exclude_self=True)[:, 0].tolist() == [1, 0, 1]


def test_knn_k_equals_n_is_full_sort(backend, rng):
    X = rng.normal(size=(12, 3))
    out = knn(X, 12)
    for i, row in enumerate(out):
        assert sorted(row.tolist()) == list(range(12))
        d = [sqdist(X[i], X[j]) for j in row]
        assert d == sorted(d)
        assert row[0] == i


def test_knn_matches_brute_force_50_points(backend, rng):
    X = rng.normal(size=(50, 3))
    np.testing.assert_array_equal(knn(X, 5), brute_knn(X, 5))
    np.testing.assert_array_equal(knn(X, 5, exclude_self=True), brute_knn(X, 5, exclude_self=True))


def test_knn_ties_go_to_lower_index(backend):
    # integer grid: many exact distance ties
    X = np.array([[x, y] for x in range(4) for y in range(4)], dtype=float)
    np.testing.assert_array_equal(knn(X, 6, exclude_self=True), brute_knn(X, 6, exclude_self=True))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(2, 25), st.integers(1, 4)),
              elements=st.integers(-3, 3).map(float)), st.integers(1, 6), st.booleans())
def test_knn_property_vs_oracle(X, k, excl):
    k = min(k, len(X) - (1 if excl else 0))
    np.testing.assert_array_equal(knn(X, k, excl), brute_knn(X, k, excl))


def test_knn_rejects_bad_k():
    with pytest.raises(ParameterError):
        knn(np.zeros((3, 2)), 3, exclude_self=True)
    with pytest.raises(ShapeError):
        knn(np.zeros(3), 1)


def test_fps_trivial_cases(backend, rng):
    X = rng.normal(size=(7, 3))
    assert fps(X, 1, start=4).tolist() == [4]
    square = np.array([[0, 0], [1, 0], [0, 1], [1, 1]], dtype=float)
    assert fps(square, 2, start=0).tolist() == [0, 3]


@pytest.mark.parametrize("seed", range(10))
def test_fps_prefixes_are_greedy(backend, seed):
    X = np.random.default_rng(seed).normal(size=(8, 3))
    picks = fps(X, 4).tolist()
    assert picks == brute_fps(X, 4)
    for t in range(1, 4):
        mind = [min(sqdist(X[j], X[p]) for p in picks[:t]) for j in range(8)]
        assert mind[picks[t]] == max(mind)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 20), st.integers(1, 3)),
              elements=st.integers(-2, 2).map(float)), st.data())
def test_fps_property_with_ties(X, data):
    m = data.draw(st.integers(1, len(X)))
    start = data.draw(st.integers(0, len(X) - 1))
    assert fps(X, m, start).tolist() == brute_fps(X, m, start)


def test_fps_rejects_bad_arguments():
    with pytest.raises(ParameterError):
        fps(np.zeros((3, 2)), 4)
    with pytest.raises(ParameterError):
        fps(np.zeros((3, 2)), 1, start=3)


def test_normalize_examples(rng):
    single = normalize_cloud(PointCloud([[5.0, 5.0, 5.0]]))
    np.testing.assert_array_equal(single.xyz, [[0.0, 0.0, 0.0]])
    pair = PointCloud([[-1.0, 0, 0], [1.0, 0, 0]])
    np.testing.assert_array_equal(normalize_cloud(pair).xyz, pair.xyz)
    cloud = PointCloud(rng.normal(3.0, 5.0, size=(200, 3)))
    out = normalize_cloud(cloud)
    assert np.abs(out.xyz.mean(axis=0)).max() < 1e-9
    assert abs(np.linalg.norm(out.xyz, axis=1).max() - 1.0) < 1e-9


def _labeled(n, rng):
    return LabeledPointCloud(PointCloud(rng.normal(size=(n, 3))), rng.integers(0, 5, n))


def test_random_subsample(rng):
    lc = _labeled(2048, rng)
    same = random_subsample(lc, 2048, 7)
    assert sorted(map(tuple, same.cloud.xyz)) == sorted(map(tuple, lc.cloud.xyz))
    big = _labeled(5000, rng)
    sub = random_subsample(big, 2048, 3)
    assert len(sub) == 2048
    rows = {tuple(r) for r in big.cloud.xyz}
    assert all(tuple(r) in rows for r in sub.cloud.xyz)
    again = random_subsample(big, 2048, 3)
    np.testing.assert_array_equal(sub.cloud.xyz, again.cloud.xyz)
    np.testing.assert_array_equal(sub.labels, again.labels)
    padded = random_subsample(_labeled(10, rng), 25, 0)
    assert len(padded) == 25


def test_containers_validate():
    with pytest.raises(ParameterError):
        PointCloud([[0, 0, 0]], [[0.5, 0, 0]])
    with pytest.raises(ParameterError):
        PointCloud([[np.nan, 0, 0]])
    with pytest.raises(ShapeError):
        LabeledPointCloud(PointCloud([[0, 0, 0]]), [0, 1])
    with pytest.raises(ParameterError):
        LabeledPointCloud(PointCloud([[0, 0, 0]]), [9])
    with pytest.raises(ParameterError):
        ClassAlphabet(("a", "a"))
    assert CAD_CLASSES.background == "plane"
    assert PointCloud([[1, 2, 3]]).missing_normals.tolist() == [True]
