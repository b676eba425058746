"""Transductive label propagation over prototypes + query points.

Graph: w_ij = exp(-||V_i - V_j||^2 / sigma^2) on the k-NN pattern (self
excluded).  Normalization uses the symmetrized matrix M = W + W^T with degrees
d_i = sum_j M_ij (1e-12 for isolated nodes), S = D^-1/2 M D^-1/2.

* iterative:   Z_{t+1} = alpha S Z_t + (1 - alpha) Y, Z_0 = Y
* closed form: Z* = (I - alpha S)^-1 Y   (sparse LU, no explicit inverse)

The recurrence converges to (1 - alpha) Z*, not Z* itself.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import diffcore as dc
from .errors import DegenerateGraphError, NumericError, ParameterError, ShapeError
from .geom import knn

DEGREE_EPS = 1e-12
PROB_FLOOR = 1e-12
RESIDUAL_TOL = 1e-10


@dataclass(frozen=True)
class LpaConfig:
    k: int = 10
    alpha: float = 0.99
    sigma: float = None  # None: sigma^2 = mean squared k-NN distance of the graph


@dataclass
class AffinityGraph:
    n: int
    rows: np.ndarray
    cols: np.ndarray
    weights: np.ndarray
    sigma: float
    n_labeled: int = 0

    @property
    def W(self):
        return sp.csr_matrix((self.weights, (self.rows, self.cols)), shape=(self.n, self.n))

    @property
    def M(self):
        W = self.W
        return (W + W.T).tocsr()

    @property
    def raw_degrees(self):
        return np.asarray(self.M.sum(axis=1)).ravel()

    @property
    def degrees(self):
        # regularize only isolated nodes so connected graphs are normalized exactly
        d = self.raw_degrees
        return np.where(d > 0, d, DEGREE_EPS)

    def normalized(self):
        s = 1.0 / np.sqrt(self.degrees)
        D = sp.diags(s)
        return (D @ self.M @ D).tocsr()


def _edge_sqdist(X, rows, cols):
    diff = X[rows] - X[cols]
    return (diff * diff).sum(axis=1)


def knn_edges(X, k):
    n = len(X)
    if not 1 <= k < n:
        raise ParameterError(f"graph k={k} must satisfy 1 <= k < n={n}")
    nbrs = knn(X, k, exclude_self=True)
    return np.repeat(np.arange(n), k), nbrs.reshape(-1)


def _sigma2(sqd, sigma):
    if sigma is None:
        s2 = float(sqd.sum() * (1.0 / len(sqd))) if len(sqd) else 0.0
        return s2 if s2 > 0 else 1.0
    if not sigma > 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    return float(sigma) ** 2


def build_graph(node_features, k, sigma=None, n_labeled=0):
    X = np.asarray(node_features, dtype=np.float64)
    if sigma is not None and not sigma > 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    rows, cols = knn_edges(X, int(k))
    sqd = _edge_sqdist(X, rows, cols)
    s2 = _sigma2(sqd, sigma)
    return AffinityGraph(len(X), rows, cols, np.exp(-sqd / s2), float(np.sqrt(s2)), int(n_labeled))


def _check_alpha(alpha):
    if not 0 <= alpha < 1:
        raise ParameterError(f"alpha must lie in [0, 1), got {alpha}")


def _check_Y(graph, Y):
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim != 2 or Y.shape[0] != graph.n:
        raise ShapeError(f"label matrix {Y.shape} does not match {graph.n} graph nodes")
    return Y


def initial_labels(tags, n_unlabeled, n_classes):
    """One-hot rows for labeled nodes followed by zero rows for unlabeled ones."""
    tags = np.asarray(tags, dtype=np.int64)
    Y = np.zeros((len(tags) + n_unlabeled, n_classes))
    Y[np.arange(len(tags)), tags] = 1.0
    return Y


def propagate_iterative(graph, Y, alpha, steps):
    _check_alpha(alpha)
    Y = _check_Y(graph, Y)
    if (graph.raw_degrees == 0).any():
        raise DegenerateGraphError("graph has isolated nodes with zero degree")
    S = graph.normalized()
    Z = Y.copy()
    for _ in range(int(steps)):
        Z = alpha * (S @ Z) + (1.0 - alpha) * Y
    return Z


def _factor(graph, alpha):
    A = (sp.identity(graph.n, format="csc") - alpha * graph.normalized()).tocsc()
    try:
        return A, spla.splu(A, permc_spec="MMD_AT_PLUS_A")
    except RuntimeError as exc:
        raise NumericError(f"label propagation system is singular: {exc}") from None


def _solve(A, lu, Y):
    Z = lu.solve(Y)
    R = A @ Z - Y
    if np.abs(R).max(initial=0.0) > RESIDUAL_TOL:
        Z = Z - lu.solve(R)  # one step of iterative refinement
        R = A @ Z - Y
    worst = np.sqrt((R * R).sum(axis=0)).max(initial=0.0)
    if not np.isfinite(Z).all() or worst > RESIDUAL_TOL:
        raise NumericError(f"label propagation solve residual {worst:.3g} exceeds {RESIDUAL_TOL}")
    return Z


def propagate_closed_form(graph, Y, alpha):
    _check_alpha(alpha)
    Y = _check_Y(graph, Y)
    A, lu = _factor(graph, alpha)
    return _solve(A, lu, Y)


def predict_probs(Z):
    Z = np.asarray(Z, dtype=np.float64)
    e = np.exp(Z - Z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(H, truth, n_query, n_points):
    """-(1/|Q|)(1/n) sum log H[truth]; H rows are all query points stacked."""
    H = np.asarray(H, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.int64)
    if len(truth) != len(H):
        raise ShapeError(f"{len(truth)} labels for {len(H)} probability rows")
    if len(truth) and (truth.min() < 0 or truth.max() >= H.shape[1]):
        raise ParameterError("label out of range for the probability matrix")
    picked = np.maximum(H[np.arange(len(truth)), truth], PROB_FLOOR)
    return float(-np.log(picked).sum() / (n_query * n_points))


def cross_entropy_t(H, truth, n_query, n_points):
    truth = np.asarray(truth, dtype=np.int64)
    if len(truth) and (truth.min() < 0 or truth.max() >= H.shape[1]):
        raise ParameterError("label out of range for the probability matrix")
    onehot = np.zeros(H.shape)
    onehot[np.arange(len(truth)), truth] = 1.0
    logH = dc.log(H, PROB_FLOOR)
    picked = dc.reduce_sum(dc.mul(logH, H.graph.constant(onehot)))
    return dc.scale(picked, -1.0 / (n_query * n_points))


def segment_episode(prototypes, query_features, n_classes, config=LpaConfig()):
    """Label query points by propagation from the prototypes; returns (labels, H)."""
    Q = np.asarray(query_features, dtype=np.float64)
    nodes = np.vstack([prototypes.prototypes, Q])
    n_l = len(prototypes)
    graph = build_graph(nodes, config.k, config.sigma, n_l)
    Y = initial_labels(prototypes.classes, len(Q), n_classes)
    Z = propagate_closed_form(graph, Y, config.alpha)
    H = predict_probs(Z[n_l:])
    return np.argmax(H, axis=1), H


# ----------------------------------------------------------- differentiable path


def _propagation_op(w, rows, cols, n, Y, alpha):
    """Z* = (I - alpha S(w))^-1 Y as a graph op of the edge weights ``w``."""
    g = w.graph
    wv = w.value
    graph = AffinityGraph(n, rows, cols, wv, 1.0)
    A, lu = _factor(graph, alpha)
    Z = _solve(A, lu, Y)
    d = graph.degrees
    s = 1.0 / np.sqrt(d)

    def vjp(G):
        lam = lu.solve(np.ascontiguousarray(G), trans="T")
        p_rc = alpha * (lam[rows] * Z[cols]).sum(axis=1)
        p_cr = alpha * (lam[cols] * Z[rows]).sum(axis=1)
        both = p_rc + p_cr
        gs = np.bincount(rows, weights=both * wv * s[cols], minlength=n) + \
            np.bincount(cols, weights=both * wv * s[rows], minlength=n)
        gd = -0.5 * gs * s**3
        return (both * s[rows] * s[cols] + gd[rows] + gd[cols],)

    return g.record("label_propagation", (w,), Z, vjp)


def propagate_t(nodes, Y, k, alpha, sigma=None):
    """Differentiable closed-form propagation over node features ``nodes`` (a tensor)."""
    _check_alpha(alpha)
    n = nodes.shape[0]
    rows, cols = knn_edges(nodes.value, int(k))
    diff = dc.subtract(dc.gather_rows(nodes, rows), dc.gather_rows(nodes, cols))
    sqd = dc.reduce_sum(dc.mul(diff, diff), axis=1)
    if sigma is None and float(sqd.value.mean()) > 0:
        s2 = dc.reduce_mean(sqd)
    else:
        s2 = nodes.graph.constant(_sigma2(sqd.value, sigma))
    w = dc.exp(dc.scale(dc.divide(sqd, s2), -1.0))
    return _propagation_op(w, rows, cols, n, np.asarray(Y, dtype=np.float64), alpha)


# ------------------------------------------------------------------ debug dumps


def write_edge_list(graph, path):
    with open(path, "w") as fh:
        for i, j, w in zip(graph.rows, graph.cols, graph.weights):
            fh.write(f"{int(i)} {int(j)} {float(w)!r}\n")


def write_label_matrix(Z, path):
    np.savetxt(path, np.asarray(Z), delimiter=",", fmt="%.17g")
