"""Point-cloud containers and geometric primitives: k-NN, FPS, normalization, subsampling."""

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ParameterError, ShapeError

NORMAL_TOL = 1e-6


@dataclass(frozen=True)
class ClassAlphabet:
    names: tuple
    background_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        if len(set(self.names)) != len(self.names):
            raise ParameterError(f"duplicate class names in {self.names}")
        if not 0 <= self.background_index < len(self.names):
            raise ParameterError(f"background index {self.background_index} out of range")

    def __len__(self):
        return len(self.names)

    @property
    def background(self):
        return self.names[self.background_index]

    @property
    def foreground(self):
        return [i for i in range(len(self.names)) if i != self.background_index]

    def index(self, name):
        return self.names.index(name)


# Plane doubles as the episode background.
CAD_CLASSES = ClassAlphabet(("plane", "hole", "pocket", "chamfer", "fillet"), 0)
PLANE, HOLE, POCKET, CHAMFER, FILLET = range(5)


@dataclass
class PointCloud:
    """n points with xyz coordinates and unit normals (zero normal = missing)."""

    xyz: np.ndarray
    normals: np.ndarray = None

    def __post_init__(self):
        self.xyz = np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        if self.normals is None:
            self.normals = np.zeros_like(self.xyz)
        self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        if len(self.xyz) < 1:
            raise ShapeError("point cloud must contain at least one point")
        if self.normals.shape != self.xyz.shape:
            raise ShapeError(f"normals {self.normals.shape} do not match points {self.xyz.shape}")
        if not (np.isfinite(self.xyz).all() and np.isfinite(self.normals).all()):
            raise ParameterError("point cloud contains non-finite values")
        lengths = np.linalg.norm(self.normals, axis=1)
        bad = (np.abs(lengths - 1.0) > NORMAL_TOL) & (lengths != 0.0)
        if bad.any():
            raise ParameterError(f"{int(bad.sum())} normals are neither unit length nor zero")

    def __len__(self):
        return len(self.xyz)

    @property
    def features(self):
        """(n, 6) array of x, y, z, nx, ny, nz."""
        return np.hstack([self.xyz, self.normals])

    @property
    def missing_normals(self):
        return ~self.normals.any(axis=1)

    def take(self, idx):
        return PointCloud(self.xyz[idx], self.normals[idx])


@dataclass
class LabeledPointCloud:
    cloud: PointCloud
    labels: np.ndarray
    alphabet: ClassAlphabet = CAD_CLASSES
    name: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(self.labels) != len(self.cloud):
            raise ShapeError(f"{len(self.labels)} labels for {len(self.cloud)} points")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.alphabet)):
            raise ParameterError("label outside the class alphabet")

    def __len__(self):
        return len(self.labels)

    def take(self, idx):
        return LabeledPointCloud(self.cloud.take(idx), self.labels[idx], self.alphabet, self.name, dict(self.meta))

    def histogram(self):
        return np.bincount(self.labels, minlength=len(self.alphabet))


def _as_matrix(features):
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeError(f"expected an (n, d) array, got shape {X.shape}")
    if not np.isfinite(X).all():
        raise ParameterError("features contain non-finite values")
    return X


def knn(features, k, exclude_self=False):
    """Indices of the k nearest rows of each row (squared Euclidean, ties -> lower index)."""
    X = _as_matrix(features)
    n = len(X)
    k = int(k)
    if not 1 <= k <= n - (1 if exclude_self else 0):
        raise ParameterError(f"k={k} out of range for n={n} (exclude_self={exclude_self})")
    return kernels.knn(X, k, exclude_self)


def fps(features, m, start=0):
    """Greedy farthest point sampling; result[0] = start, ties to the lower index."""
    X = _as_matrix(features)
    n = len(X)
    m = int(m)
    if not 1 <= m <= n:
        raise ParameterError(f"cannot pick m={m} of n={n} points")
    if not 0 <= start < n:
        raise ParameterError(f"start index {start} out of range")
    return kernels.fps(X, m, start)


def normalize_cloud(cloud):
    """Center at the origin and scale the farthest point to radius 1; normals untouched."""
    xyz = cloud.xyz - cloud.xyz.mean(axis=0)
    radius = np.sqrt((xyz**2).sum(axis=1)).max()
    if radius > 0:
        xyz = xyz / radius
    return PointCloud(xyz, cloud.normals.copy())


def normalize_labeled(lc):
    return LabeledPointCloud(normalize_cloud(lc.cloud), lc.labels.copy(), lc.alphabet, lc.name, dict(lc.meta))


def random_subsample(lc, target_n, rng_seed):
    """Uniform subsample without replacement, or pad by resampling when the cloud is too small."""
    target_n = int(target_n)
    if target_n < 1:
        raise ParameterError("target_n must be positive")
    rng = np.random.default_rng(rng_seed)
    n = len(lc)
    if n >= target_n:
        idx = rng.choice(n, size=target_n, replace=False)
    else:
        idx = np.concatenate([rng.permutation(n), rng.choice(n, size=target_n - n, replace=True)])
    return lc.take(idx)
