"""Multi-prototype construction and center loss."""

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .errors import ParameterError
from .geom import fps

DEFAULT_N_PROTOTYPES = 10
DEFAULT_CENTER_RATE = 0.5


def prototype_cells(features, n_p):
    """FPS anchors in feature space (start = row 0) and the nearest-anchor partition.

    Each anchor row is pinned to its own cell so no cell is empty even when
    features repeat; every other row goes to its nearest anchor, ties to the
    lower anchor.  Returns (anchor rows, list of row-index arrays).
    """
    X = np.asarray(features, dtype=np.float64)
    if len(X) == 0:
        raise ParameterError("cannot build prototypes from an empty class subset")
    m = min(int(n_p), len(X))
    anchors = fps(X, m, 0)
    d2 = ((X[:, None, :] - X[anchors][None, :, :]) ** 2).sum(axis=2)
    owner = np.argmin(d2, axis=1)
    owner[anchors] = np.arange(m)
    cells = [np.flatnonzero(owner == a) for a in range(m)]
    return anchors, cells


@dataclass
class PrototypeSet:
    prototypes: np.ndarray  # (total, d)
    classes: np.ndarray  # class tag per prototype
    cells: list = field(default_factory=list)  # row indices into the class subset, per prototype

    def __len__(self):
        return len(self.prototypes)


def build_prototypes(class_features, n_p=DEFAULT_N_PROTOTYPES):
    """``class_features`` maps class id -> (n_c, d) support features; classes in key order."""
    protos, tags, cells = [], [], []
    for c, X in class_features.items():
        X = np.asarray(X, dtype=np.float64)
        _, cl = prototype_cells(X, n_p)
        for cell in cl:
            protos.append(X[cell].mean(axis=0))
            tags.append(c)
            cells.append(cell)
    return PrototypeSet(np.array(protos), np.array(tags, dtype=np.int64), cells)


def prototypes_t(feats, class_rows, n_p):
    """Differentiable prototypes from a stacked support feature tensor.

    ``class_rows`` maps class id -> row indices of ``feats`` belonging to that class.
    Returns (prototype tensor, class tags).
    """
    groups, tags = [], []
    for c, rows in class_rows.items():
        rows = np.asarray(rows, dtype=np.int64)
        _, cl = prototype_cells(feats.value[rows], n_p)
        groups += [rows[cell] for cell in cl]
        tags += [c] * len(cl)
    return dc.reduce_mean_over_group(feats, groups), np.array(tags, dtype=np.int64)


@dataclass
class ClassCenters:
    centers: dict = field(default_factory=dict)  # class id -> (d,) array
    rate: float = DEFAULT_CENTER_RATE

    def __post_init__(self):
        if not 0 < self.rate <= 1:
            raise ParameterError("center update rate must lie in (0, 1]")

    def matrix_for(self, labels):
        missing = sorted(set(np.unique(labels).tolist()) - set(self.centers))
        if missing:
            raise ParameterError(f"no center for classes {missing}")
        return np.stack([self.centers[int(c)] for c in labels]) if len(labels) else np.zeros((0, 0))


def _class_means(features, labels):
    return {int(c): features[labels == c].mean(axis=0) for c in np.unique(labels)}


def init_centers(features, labels, rate=DEFAULT_CENTER_RATE):
    return ClassCenters(_class_means(np.asarray(features, dtype=np.float64), np.asarray(labels)), rate)


def update_centers(centers, features, labels):
    """Move each present class center toward its batch mean by ``rate``; copy-on-update."""
    new = {k: v.copy() for k, v in centers.centers.items()}
    for c, mean in _class_means(np.asarray(features, dtype=np.float64), np.asarray(labels)).items():
        new[c] = new[c] - centers.rate * (new[c] - mean) if c in new else mean
    return ClassCenters(new, centers.rate)


def center_loss(features, labels, centers):
    """0.5 * sum_i ||V_i - mu_{y_i}||^2."""
    labels = np.asarray(labels)
    diff = np.asarray(features, dtype=np.float64) - centers.matrix_for(labels)
    return 0.5 * float(np.sum(diff * diff))


def center_loss_t(feats, labels, centers):
    mu = feats.graph.constant(centers.matrix_for(np.asarray(labels)))
    return dc.scale(dc.sum_of_squares(dc.subtract(feats, mu)), 0.5)
