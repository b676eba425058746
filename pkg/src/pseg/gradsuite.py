"""Finite-difference gradient suites for the ops, the extractor and the episode loss.

Each case is a (name, f, inputs) triple for :func:`diffcore.grad_check`; inputs are
drawn from a fixed seed so kinks (ReLU at zero, max ties, kNN switches) stay far
from the evaluation points.
"""

import time
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import fen, proto
from .episodes import Episode, QuerySample, SupportSample
from .geom import CAD_CLASSES, LabeledPointCloud, PointCloud
from .lpa import LpaConfig, cross_entropy_t, initial_labels, propagate_t

TINY_FEN = fen.FenConfig(tnet_widths=(8,), tnet_fc=8, edgeconv_widths=(8, 8), k_neighbors=6, attn_dim=8,
                         head_widths=(16,))


@dataclass
class CaseResult:
    suite: str
    name: str
    max_error: float
    seconds: float


def _distinct(rng, shape):
    """Values with well separated entries so max/argmax never tie under a small step."""
    n = int(np.prod(shape))
    return (rng.permutation(n) / n * 4.0 - 2.0 + rng.uniform(0, 0.1 / n, n)).reshape(shape)


def op_cases(seed=0):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(4, 3))
    B = rng.normal(size=(3, 5))
    C = rng.normal(size=(4, 3))
    row = rng.normal(size=3)
    away = np.where(np.abs(A) < 0.1, 0.3, A)
    groups = [np.array([0, 2]), np.array([1, 2, 3]), np.array([3])]

    def wsum(g, t):
        # fixed weights per output shape turn any output into a scalar
        w = np.random.default_rng([seed, *t.shape]).normal(size=t.shape)
        return dc.reduce_sum(dc.mul(t, g.constant(w)))

    s = np.array(1.7)
    return [
        ("matmul", lambda g, x: wsum(g, dc.matmul(x["a"], x["b"])), {"a": A, "b": B}),
        ("add", lambda g, x: wsum(g, dc.add(x["a"], x["c"])), {"a": A, "c": C}),
        ("add_bias", lambda g, x: wsum(g, dc.add(x["a"], x["r"])), {"a": A, "r": row}),
        ("subtract", lambda g, x: wsum(g, dc.subtract(x["a"], x["c"])), {"a": A, "c": C}),
        ("subtract_bias", lambda g, x: wsum(g, dc.subtract(x["a"], x["r"])), {"a": A, "r": row}),
        ("mul", lambda g, x: wsum(g, dc.mul(x["a"], x["c"])), {"a": A, "c": C}),
        ("scale", lambda g, x: wsum(g, dc.scale(x["a"], -0.7)), {"a": A}),
        ("divide", lambda g, x: wsum(g, dc.divide(x["a"], x["s"])), {"a": A, "s": s}),
        ("transpose", lambda g, x: wsum(g, dc.transpose(x["a"])), {"a": A}),
        ("reshape", lambda g, x: wsum(g, dc.reshape(x["a"], (3, 4))), {"a": A}),
        ("concat_rows", lambda g, x: wsum(g, dc.concat([x["a"], x["c"]], axis=0)), {"a": A, "c": C}),
        ("concat_cols", lambda g, x: wsum(g, dc.concat([x["a"], x["c"]], axis=1)),
         {"a": A, "c": C}),
        ("leaky_relu", lambda g, x: wsum(g, dc.leaky_relu(x["a"], 0.2)), {"a": away}),
        ("exp", lambda g, x: wsum(g, dc.exp(x["a"])), {"a": A}),
        ("log", lambda g, x: wsum(g, dc.log(x["a"])), {"a": np.abs(A) + 0.5}),
        ("reduce_sum", lambda g, x: dc.reduce_sum(dc.mul(x["a"], x["a"])), {"a": A}),
        ("reduce_sum_axis0", lambda g, x: wsum(g, dc.reduce_sum(x["a"], axis=0)), {"a": A}),
        ("reduce_sum_axis1", lambda g, x: wsum(g, dc.reduce_sum(x["a"], axis=1)), {"a": A}),
        ("reduce_mean", lambda g, x: dc.reduce_mean(dc.exp(x["a"])), {"a": A}),
        ("sum_of_squares", lambda g, x: dc.sum_of_squares(x["a"]), {"a": A}),
        ("gather_rows", lambda g, x: wsum(g, dc.gather_rows(x["a"], [3, 0, 0, 2])), {"a": A}),
        ("reduce_max_over_group", lambda g, x: wsum(g, dc.reduce_max_over_group(x["a"], groups)),
         {"a": _distinct(rng, (4, 3))}),
        ("reduce_mean_over_group", lambda g, x: wsum(g, dc.reduce_mean_over_group(x["a"], groups)), {"a": A}),
        ("softmax_rows", lambda g, x: wsum(g, dc.softmax_rows(x["a"])), {"a": A}),
        ("normalize_rows", lambda g, x: wsum(g, dc.normalize_rows(x["a"])), {"a": A}),
    ]


def model_cases(seed=0):
    """Composite blocks: EdgeConv, attention, T-Net regularizer, propagation, prototypes, losses."""
    rng = np.random.default_rng(seed)
    h = rng.normal(size=(10, 4))
    nbrs = np.argsort(((h[:, None] - h[None]) ** 2).sum(-1), axis=1, kind="stable")[:, :4]
    Wout = rng.normal(size=(10, 5))
    nodes = rng.normal(size=(12, 3))
    Y = initial_labels(np.array([0, 1, 2]), 9, 3)
    Wz = rng.normal(size=(12, 3))
    labels = np.array([0, 1, 1, 2, 0, 2])
    feats6 = rng.normal(size=(6, 4))
    centers = proto.init_centers(rng.normal(size=(6, 4)), labels)
    H = rng.dirichlet(np.ones(3), size=6)
    support = rng.normal(size=(14, 3))
    rows = {0: np.arange(0, 6), 1: np.arange(6, 10), 2: np.arange(10, 14)}
    Wp = rng.normal(size=(9, 3))

    def ws(g, t, w):
        return dc.reduce_sum(dc.mul(t, g.constant(w)))

    return [
        ("edgeconv", lambda g, x: ws(g, fen.edgeconv(x["h"], nbrs, x["theta"], x["phi"], x["b"]), Wout),
         {"h": h, "theta": rng.normal(size=(4, 5)), "phi": rng.normal(size=(4, 5)), "b": rng.normal(size=5)}),
        ("self_attention", lambda g, x: ws(g, fen.self_attention(x["x"], x["wq"], x["wk"], x["wv"])[0], Wout[:, :4]),
         {"x": h, "wq": rng.normal(size=(4, 3)), "wk": rng.normal(size=(4, 3)), "wv": rng.normal(size=(4, 4))}),
        ("reg_loss", lambda g, x: fen.reg_loss_t(x["A"]), {"A": rng.normal(size=(3, 3))}),
        ("label_propagation", lambda g, x: ws(g, propagate_t(x["nodes"], Y, 4, 0.9), Wz), {"nodes": nodes}),
        ("label_propagation_fixed_sigma", lambda g, x: ws(g, propagate_t(x["nodes"], Y, 4, 0.99, 0.8), Wz),
         {"nodes": nodes}),
        ("prototypes", lambda g, x: ws(g, proto.prototypes_t(x["s"], rows, 3)[0], Wp), {"s": support}),
        ("center_loss", lambda g, x: proto.center_loss_t(x["f"], labels, centers), {"f": feats6}),
        ("cross_entropy", lambda g, x: cross_entropy_t(dc.softmax_rows(x["z"]), labels % 3, 2, 3),
         {"z": np.log(H)}),
    ]


def toy_cloud(n, seed, name=""):
    """Random points on a bumpy sheet with labels from three bands along x."""
    rng = np.random.default_rng(seed)
    xy = rng.uniform(-1, 1, size=(n, 2))
    z = 0.3 * np.sin(2 * xy[:, 0]) * np.cos(3 * xy[:, 1])
    nrm = np.stack([-0.6 * np.cos(2 * xy[:, 0]) * np.cos(3 * xy[:, 1]),
                    0.9 * np.sin(2 * xy[:, 0]) * np.sin(3 * xy[:, 1]), np.ones(n)], axis=1)
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    labels = np.where(xy[:, 0] < -0.3, 1, np.where(xy[:, 0] > 0.4, 2, 0))
    return LabeledPointCloud(PointCloud(np.column_stack([xy, z]), nrm), labels, CAD_CLASSES, name)


def extractor_case(seed=0, n=24, config=TINY_FEN):
    params = fen.init_params(config, seed)
    rng = np.random.default_rng(seed + 1)
    # move the T-Net off its zero-weight start so every branch carries gradient
    params.tensors["tnet.out.w"] = rng.normal(0.0, 0.05, size=params.tensors["tnet.out.w"].shape)
    cloud = toy_cloud(n, seed).cloud
    Wf = rng.normal(size=(n, config.out_dim))
    Wa = rng.normal(size=(3, 3))

    def f(g, P):
        feats, A = fen.forward(g, P, cloud, config)
        return dc.add(dc.reduce_sum(dc.mul(feats, g.constant(Wf))), dc.reduce_sum(dc.mul(A, g.constant(Wa))))
    return "extract_features", f, dict(params.tensors)


def episode_case(seed=0, n=32, config=TINY_FEN, lam=0.9):
    """Full episode loss L_m + lam L_c + L_reg on a 2-way 1-shot episode of n-point clouds."""
    from .trainer import TrainConfig, episode_loss

    params = fen.init_params(config, seed)
    rng = np.random.default_rng(seed + 2)
    params.tensors["tnet.out.w"] = rng.normal(0.0, 0.05, size=params.tensors["tnet.out.w"].shape)
    corpus = [toy_cloud(n, seed + 10 + i, f"toy{i}") for i in range(3)]
    ep = Episode(2, 1, (1, 2),
                 [SupportSample(0, 1, corpus[0].labels == 1), SupportSample(1, 2, corpus[1].labels == 2)],
                 [QuerySample(2, corpus[2].labels.copy())], "train", 0)
    tc = TrainConfig(lam=lam, n_p=3, lpa=LpaConfig(k=5, alpha=0.99), unfreeze_attention=True)
    # centers fixed from the starting point: they are constants of the loss
    g0 = dc.Graph()
    out = episode_loss(g0, params.bind(g0), params, ep, corpus, tc, proto.ClassCenters({}, 0.5), None)
    centers = out[-1]
    g0.release()

    def f(g, P):
        return episode_loss(g, P, params, ep, corpus, tc, centers, None)[3]
    return "episode_loss", f, dict(params.tensors)


def run_suite(h=1e-5, seed=0, include_model=True, include_network=True):
    results = []
    suites = [("ops", op_cases(seed))]
    if include_model:
        suites.append(("blocks", model_cases(seed)))
    if include_network:
        suites.append(("network", [extractor_case(seed), episode_case(seed)]))
    for suite, cases in suites:
        for name, f, x in cases:
            t = time.perf_counter()
            err = dc.grad_check(f, x, h)
            results.append(CaseResult(suite, name, float(err), time.perf_counter() - t))
    return results
