"""Minimal dense float64 tensor engine with reverse-mode autodiff."""

from .gradcheck import grad_check
from .graph import Graph, Tensor
from .ops import (
    add,
    as_groups,
    concat,
    divide,
    exp,
    gather_rows,
    leaky_relu,
    log,
    matmul,
    mul,
    normalize_rows,
    reduce_max_over_group,
    reduce_mean,
    reduce_mean_over_group,
    reduce_sum,
    reshape,
    scale,
    softmax_rows,
    subtract,
    sum_of_squares,
    transpose,
)


def backward(graph, root):
    return graph.backward(root)


__all__ = [
    "Graph", "Tensor", "backward", "grad_check", "add", "as_groups", "concat", "divide", "exp",
    "gather_rows", "leaky_relu", "log", "matmul", "mul", "normalize_rows", "reduce_max_over_group",
    "reduce_mean", "reduce_mean_over_group", "reduce_sum", "reshape", "scale", "softmax_rows",
    "subtract", "sum_of_squares", "transpose",
]
