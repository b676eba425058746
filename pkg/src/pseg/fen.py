"""Feature extractor: transform net, dynamic-graph EdgeConv stack, self-attention and head.

Pipeline for one cloud of n points with 6 input features (xyz + normal):

    T-Net -> 3x3 transform -> EdgeConv x L (k-NN recomputed on each layer input)
          -> concat(layer outputs, broadcast global max) -> self-attention -> head MLP

Parameters live in a flat name -> array dict so they serialize directly into
checkpoints.  Names start with their group: ``tnet.``, ``edgeconv<i>.``,
``attention.``, ``head<i>.``.
"""

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .errors import ParameterError, ShapeError
from .geom import PointCloud, knn

GROUPS = ("tnet", "edgeconv", "attention", "head")


@dataclass(frozen=True)
class FenConfig:
    in_dim: int = 6
    tnet_widths: tuple = (32, 64)
    tnet_fc: int = 32
    edgeconv_widths: tuple = (64, 64, 64)
    k_neighbors: int = 20
    attn_dim: int = 64
    head_widths: tuple = (128, 64)
    negative_slope: float = 0.2

    def __post_init__(self):
        for name in ("tnet_widths", "edgeconv_widths", "head_widths"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if self.k_neighbors < 1:
            raise ParameterError("k_neighbors must be >= 1")
        if not self.edgeconv_widths or not self.head_widths or not self.tnet_widths:
            raise ParameterError("layer width lists must be non-empty")
        if min(self.edgeconv_widths + self.head_widths + self.tnet_widths + (self.tnet_fc, self.attn_dim)) < 1:
            raise ParameterError("layer widths must be positive")

    @property
    def concat_dim(self):
        return 2 * sum(self.edgeconv_widths)

    @property
    def out_dim(self):
        return self.head_widths[-1]


@dataclass
class ModelParams:
    config: FenConfig
    tensors: dict = field(default_factory=dict)

    def group_of(self, name):
        head = name.split(".", 1)[0]
        for g in GROUPS:
            if head.startswith(g):
                return g
        raise KeyError(name)

    def names(self, groups=GROUPS):
        return [n for n in self.tensors if self.group_of(n) in groups]

    def copy(self):
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def bind(self, g, trainable=GROUPS):
        """Place every tensor on graph ``g``: leaves for trainable groups, constants otherwise."""
        return {name: g.leaf(v, requires_grad=self.group_of(name) in trainable, name=name)
                for name, v in self.tensors.items()}


def init_params(config=FenConfig(), seed=0):
    rng = np.random.default_rng(seed)
    t = {}

    def he(fan_in, fan_out, gain=2.0):
        return rng.normal(0.0, np.sqrt(gain / fan_in), size=(fan_in, fan_out))

    prev = config.in_dim
    for i, w in enumerate(config.tnet_widths):
        t[f"tnet.conv{i}.w"] = he(prev, w)
        t[f"tnet.conv{i}.b"] = np.zeros(w)
        prev = w
    t["tnet.fc.w"] = he(prev, config.tnet_fc)
    t["tnet.fc.b"] = np.zeros(config.tnet_fc)
    # zero weights + identity bias: the predicted transform starts at exactly I
    t["tnet.out.w"] = np.zeros((config.tnet_fc, 9))
    t["tnet.out.b"] = np.eye(3).reshape(-1)

    prev = config.in_dim
    for i, w in enumerate(config.edgeconv_widths):
        t[f"edgeconv{i}.theta"] = he(prev, w, 1.0)
        t[f"edgeconv{i}.phi"] = he(prev, w, 1.0)
        t[f"edgeconv{i}.b"] = np.zeros(w)
        prev = w

    c = config.concat_dim
    t["attention.wq"] = he(c, config.attn_dim, 1.0)
    t["attention.wk"] = he(c, config.attn_dim, 1.0)
    t["attention.wv"] = he(c, c, 0.25)

    prev = c
    for i, w in enumerate(config.head_widths):
        t[f"head{i}.w"] = he(prev, w, 2.0 if i < len(config.head_widths) - 1 else 1.0)
        t[f"head{i}.b"] = np.zeros(w)
        prev = w
    return ModelParams(config, t)


# ----------------------------------------------------------------------- blocks


def _dense(x, w, b, slope=None):
    y = dc.add(dc.matmul(x, w), b)
    return y if slope is None else dc.leaky_relu(y, slope)


def tnet_forward(g, P, feats, config):
    """Predict the 3x3 transform from (n, 6) input features."""
    h = feats
    for i in range(len(config.tnet_widths)):
        h = _dense(h, P[f"tnet.conv{i}.w"], P[f"tnet.conv{i}.b"], config.negative_slope)
    pooled = dc.reduce_max_over_group(h, [np.arange(h.shape[0])])
    z = _dense(pooled, P["tnet.fc.w"], P["tnet.fc.b"], config.negative_slope)
    z = _dense(z, P["tnet.out.w"], P["tnet.out.b"])
    return dc.reshape(z, (3, 3))


def transform_points(g, xyz, normals, A):
    """Left-multiply coordinates and normals by A (rows: p -> A p); renormalize normals."""
    At = dc.transpose(A)
    return dc.matmul(xyz, At), dc.normalize_rows(dc.matmul(normals, At))


def edgeconv(h, neighbors, theta, phi, bias, negative_slope=0.2):
    """max_j [theta (h_j - h_i)] + phi h_i + b, then leaky ReLU.

    theta is linear, so max_j theta(h_j - h_i) = max_j (theta h_j) - theta h_i.
    """
    if neighbors.shape[0] != h.shape[0]:
        raise ShapeError(f"neighbor lists for {neighbors.shape[0]} rows, features have {h.shape[0]}")
    a = dc.matmul(h, theta)
    m = dc.reduce_max_over_group(a, neighbors)
    b = dc.add(dc.matmul(h, phi), bias)
    return dc.leaky_relu(dc.add(dc.subtract(m, a), b), negative_slope)


def self_attention(x, wq, wk, wv):
    """Single-head residual attention; returns (output, attention weights)."""
    if x.shape[1] != wq.shape[0]:
        raise ShapeError(f"attention input width {x.shape[1]} != projection width {wq.shape[0]}")
    q = dc.matmul(x, wq)
    k = dc.matmul(x, wk)
    v = dc.matmul(x, wv)
    logits = dc.scale(dc.matmul(q, dc.transpose(k)), 1.0 / np.sqrt(wq.shape[1]))
    att = dc.softmax_rows(logits)
    return dc.add(x, dc.matmul(att, v)), att


def reg_loss_t(A):
    g = A.graph
    return dc.sum_of_squares(dc.subtract(g.constant(np.eye(3)), dc.matmul(A, dc.transpose(A))))


# ---------------------------------------------------------------------- stages


def trunk_forward(g, P, cloud, config):
    """T-Net, transform and EdgeConv stack; returns ((n, concat_dim) tensor, A)."""
    xyz = g.constant(cloud.xyz)
    nrm = g.constant(cloud.normals)
    feats = g.constant(cloud.features)
    A = tnet_forward(g, P, feats, config)
    xyz2, nrm2 = transform_points(g, xyz, nrm, A)
    h = dc.concat([xyz2, nrm2], axis=1)
    n = h.shape[0]
    k = min(config.k_neighbors, n)
    outs = []
    for i in range(len(config.edgeconv_widths)):
        nbrs = knn(h.value, k)
        h = edgeconv(h, nbrs, P[f"edgeconv{i}.theta"], P[f"edgeconv{i}.phi"], P[f"edgeconv{i}.b"],
                     config.negative_slope)
        outs.append(h)
    local = dc.concat(outs, axis=1) if len(outs) > 1 else outs[0]
    glob = dc.reduce_max_over_group(local, [np.arange(n)])
    return dc.concat([local, dc.gather_rows(glob, np.zeros(n, np.int64))], axis=1), A


def attention_forward(g, P, x):
    return self_attention(x, P["attention.wq"], P["attention.wk"], P["attention.wv"])[0]


def head_forward(g, P, x, config):
    h = x
    last = len(config.head_widths) - 1
    for i in range(len(config.head_widths)):
        h = _dense(h, P[f"head{i}.w"], P[f"head{i}.b"], None if i == last else config.negative_slope)
    return h


def forward(g, P, cloud, config):
    """Full extractor on graph ``g`` with bound params ``P``; returns (features, A)."""
    x, A = trunk_forward(g, P, cloud, config)
    return head_forward(g, P, attention_forward(g, P, x), config), A


# ------------------------------------------------------------ numpy-level API


def tnet_predict(cloud, params):
    g = dc.Graph()
    P = params.bind(g, trainable=())
    out = np.array(tnet_forward(g, P, g.constant(cloud.features), params.config).value)
    g.release()
    return out


def apply_transform(cloud, A):
    A = np.asarray(A, dtype=np.float64)
    if A.shape != (3, 3) or not np.isfinite(A).all():
        raise ParameterError("transform must be a finite 3x3 matrix")
    nrm = cloud.normals @ A.T
    lengths = np.linalg.norm(nrm, axis=1, keepdims=True)
    nrm = np.where(lengths > 0, nrm / np.where(lengths > 0, lengths, 1.0), 0.0)
    return PointCloud(cloud.xyz @ A.T, nrm)


def reg_loss(A):
    A = np.asarray(A, dtype=np.float64)
    r = np.eye(3) - A @ A.T
    return float(np.sum(r * r))


def extract_features(cloud, params):
    """(n, d) per-point embeddings and the predicted 3x3 transform."""
    g = dc.Graph()
    P = params.bind(g, trainable=())
    feats, A = forward(g, P, cloud, params.config)
    g.release()
    return np.array(feats.value), np.array(A.value)
