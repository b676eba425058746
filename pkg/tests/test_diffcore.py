import numpy as np
import pytest

from pseg import diffcore as dc
from pseg.errors import NumericError, ParameterError, ShapeError
from pseg.gradsuite import op_cases


def test_matmul_identity(rng):
    g = dc.Graph()
    A = rng.normal(size=(3, 3))
    out = dc.matmul(g.constant(np.eye(3)), g.constant(A))
    np.testing.assert_array_equal(out.value, A)


def test_softmax_uniform_and_shift_invariant(rng):
    g = dc.Graph()
    np.testing.assert_allclose(dc.softmax_rows(g.constant(np.full((1, 4), 2.5))).value, [[0.25] * 4], atol=0)
    x = rng.normal(size=(5, 7)) * 30
    p = dc.softmax_rows(g.constant(x)).value
    q = dc.softmax_rows(g.constant(x + 123.0)).value
    assert np.abs(p.sum(axis=1) - 1).max() < 1e-9
    assert np.abs(p - q).max() < 1e-9


def test_group_max_example():
    g = dc.Graph()
    out = dc.reduce_max_over_group(g.constant([[3.0], [7.0], [5.0]]), [[0, 1], [2]])
    assert out.value[:, 0].tolist() == [7.0, 5.0]
    assert out.aux[:, 0].tolist() == [1, 2]


def test_group_max_tie_gradient_to_lowest_index():
    g = dc.Graph()
    x = g.leaf([[1.0], [4.0], [4.0]])
    grads = g.backward(dc.reduce_sum(dc.reduce_max_over_group(x, [[2, 1, 0]])))
    assert grads[x][:, 0].tolist() == [0.0, 1.0, 0.0]


def test_sum_of_squares_gradient():
    g = dc.Graph()
    x = g.leaf([1.0, 2.0])
    assert g.backward(dc.sum_of_squares(x))[x].tolist() == [2.0, 4.0]


def test_matmul_sum_gradient(rng):
    A, B = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    g = dc.Graph()
    a, b = g.leaf(A), g.leaf(B)
    grads = g.backward(dc.reduce_sum(dc.matmul(a, b)))
    np.testing.assert_allclose(grads[a], np.ones((3, 2)) @ B.T, rtol=0, atol=1e-14)


def test_unreached_leaf_gets_zero():
    g = dc.Graph()
    x, y = g.leaf([1.0, 2.0]), g.leaf([[3.0]])
    grads = g.backward(dc.sum_of_squares(x))
    assert grads[y].tolist() == [[0.0]]


def test_backward_deterministic(rng):
    X = rng.normal(size=(6, 4))
    res = []
    for _ in range(2):
        g = dc.Graph()
        x = g.leaf(X)
        root = dc.reduce_sum(dc.softmax_rows(dc.leaky_relu(dc.matmul(x, dc.transpose(x)))))
        res.append(g.backward(root)[x])
    np.testing.assert_array_equal(res[0], res[1])


def test_errors():
    g = dc.Graph()
    with pytest.raises(ShapeError):
        dc.matmul(g.constant(np.ones((2, 3))), g.constant(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        dc.add(g.constant(np.ones((2, 3))), g.constant(np.ones(2)))
    with pytest.raises(ParameterError):
        dc.reduce_max_over_group(g.constant(np.ones((2, 1))), [[0], []])
    with pytest.raises(ParameterError):
        g.backward(g.leaf([1.0, 2.0]))
    other = dc.Graph()
    with pytest.raises(ParameterError):
        dc.add(g.constant([1.0]), other.constant([1.0]))


def test_grad_check_examples(rng):
    assert dc.grad_check(lambda g, x: dc.reduce_sum(x), rng.normal(size=5)) <= 1e-10
    assert dc.grad_check(lambda g, x: dc.sum_of_squares(x), rng.uniform(-1, 1, 8)) <= 1e-6
    with pytest.raises(NumericError), np.errstate(invalid="ignore"):
        dc.grad_check(lambda g, x: dc.log(x), np.array([-1.0]))


@pytest.mark.parametrize("seed", range(10))
def test_every_op_passes_grad_check(seed):
    for name, f, x in op_cases(seed):
        assert dc.grad_check(f, x) <= 1e-4, name


def test_release_keeps_values():
    g = dc.Graph()
    t = dc.scale(g.leaf([1.0, 2.0]), 3.0)
    g.release()
    assert t.value.tolist() == [3.0, 6.0] and g.nodes == []
