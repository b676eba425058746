"""Confusion matrices, IoU / mIoU and the best-and-mean-over-runs report."""

import json
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ShapeError, UndefinedMetricError
from .lpa import LpaConfig, segment_episode
from .proto import build_prototypes

SETTINGS = ((2, 1), (2, 3), (2, 5))

REPORT_SCHEMA = {
    "type": "object",
    "required": ["method", "settings"],
    "additionalProperties": False,
    "properties": {
        "method": {"type": "string"},
        "settings": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["setting", "runs", "best_miou", "mean_miou", "per_class"],
                "additionalProperties": False,
                "properties": {
                    "setting": {"type": "string", "pattern": "^[0-9]+-way [0-9]+-shot$"},
                    "runs": {"type": "array", "minItems": 1, "items": {"type": "number", "minimum": 0, "maximum": 1}},
                    "best_miou": {"type": "number", "minimum": 0, "maximum": 1},
                    "mean_miou": {"type": "number", "minimum": 0, "maximum": 1},
                    "per_class": {"type": "object", "additionalProperties": {"type": ["number", "null"]}},
                },
            },
        },
    },
}


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows = truth, cols = prediction

    @classmethod
    def empty(cls, n_classes):
        return cls(np.zeros((n_classes, n_classes), dtype=np.int64))

    @property
    def n_classes(self):
        return len(self.counts)

    @property
    def total(self):
        return int(self.counts.sum())

    def __add__(self, other):
        if self.counts.shape != other.counts.shape:
            raise ShapeError("cannot merge confusion matrices of different sizes")
        return ConfusionMatrix(self.counts + other.counts)


def accumulate(conf, truth, pred):
    truth = np.asarray(truth, dtype=np.int64).reshape(-1)
    pred = np.asarray(pred, dtype=np.int64).reshape(-1)
    if truth.shape != pred.shape:
        raise ShapeError(f"{len(truth)} truth labels vs {len(pred)} predictions")
    n = conf.n_classes
    if len(truth) and (min(truth.min(), pred.min()) < 0 or max(truth.max(), pred.max()) >= n):
        raise ParameterError(f"label outside 0..{n - 1}")
    add = np.bincount(truth * n + pred, minlength=n * n).reshape(n, n)
    return ConfusionMatrix(conf.counts + add)


def iou_per_class(conf):
    """IoU per class; NaN where TP + FP + FN = 0."""
    c = conf.counts.astype(np.float64)
    tp = np.diag(c)
    denom = c.sum(axis=0) + c.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, tp / np.where(denom > 0, denom, 1.0), np.nan)


def miou(conf, include_background=False, background=0):
    """(per-class IoU list with NaN for undefined classes, mean over defined scored classes)."""
    ious = iou_per_class(conf)
    scored = [c for c in range(conf.n_classes) if include_background or c != background]
    vals = ious[scored]
    vals = vals[~np.isnan(vals)]
    if len(vals) == 0:
        raise UndefinedMetricError("no class has a defined IoU")
    return ious.tolist(), float(vals.mean())


# ------------------------------------------------------------------ evaluation


def segment_with_features(episode, feats_of, n_p=10, lpa_config=LpaConfig()):
    """Segment every query of ``episode``; ``feats_of(cloud index)`` returns (n, d) features.

    Returns a list of predicted label arrays (episode alphabet), one per query.
    """
    class_feats = {c: [] for c in range(episode.way + 1)}
    for s in episode.support:
        F = feats_of(s.cloud)
        class_feats[episode.remap[s.cls]].append(F[s.mask])
        class_feats[0].append(F[~s.mask])
    class_feats = {c: np.vstack(v) for c, v in class_feats.items()}
    class_feats = {c: v for c, v in class_feats.items() if len(v)}
    protos = build_prototypes(class_feats, n_p)
    Q = np.vstack([feats_of(q.cloud) for q in episode.query])
    labels, _ = segment_episode(protos, Q, episode.way + 1, lpa_config)
    out, start = [], 0
    for q in episode.query:
        out.append(labels[start:start + len(q.labels)])
        start += len(q.labels)
    return out


def evaluate_episodes(episodes, feats_of, n_p=10, lpa_config=LpaConfig(), way=None):
    """Pool one confusion matrix over all query points of all episodes."""
    conf = None
    count = 0
    for ep in episodes:
        if conf is None:
            conf = ConfusionMatrix.empty((way or ep.way) + 1)
        for q, pred in zip(ep.query, segment_with_features(ep, feats_of, n_p, lpa_config)):
            conf = accumulate(conf, q.labels, pred)
        count += 1
    if count == 0:
        raise ParameterError("empty test episode stream")
    return conf


def global_confusion(episodes, predictions, alphabet):
    """Confusion in the global alphabet: episode labels mapped back through each episode's classes."""
    conf = ConfusionMatrix.empty(len(alphabet))
    for ep, preds in zip(episodes, predictions):
        table = np.array([alphabet.background_index] + list(ep.classes), dtype=np.int64)
        for q, p in zip(ep.query, preds):
            conf = accumulate(conf, table[q.labels], table[p])
    return conf


@dataclass
class RunOutcome:
    miou: float
    per_class: dict  # global class name -> IoU (None when undefined)


def evaluate_run(episodes, feats_of, alphabet, n_p=10, lpa_config=LpaConfig()):
    """mIoU of one run over all test episodes (pooled), plus per-class IoU in the global alphabet."""
    episodes = list(episodes)
    if not episodes:
        raise ParameterError("empty test episode stream")
    preds = [segment_with_features(ep, feats_of, n_p, lpa_config) for ep in episodes]
    return evaluate_predictions(episodes, preds, alphabet)


def episode_miou(episode, preds):
    """(per-class IoU in episode labels, mIoU) of one episode; mIoU is NaN when undefined."""
    conf = ConfusionMatrix.empty(episode.way + 1)
    for q, p in zip(episode.query, preds):
        conf = accumulate(conf, q.labels, p)
    try:
        return miou(conf)
    except UndefinedMetricError:
        return iou_per_class(conf).tolist(), float("nan")


def evaluate_predictions(episodes, preds, alphabet):
    """Like :func:`evaluate_run` for stored predictions (episode labels, one array per query)."""
    episodes = list(episodes)
    if not episodes or len(preds) != len(episodes):
        raise ParameterError(f"{len(preds)} prediction sets for {len(episodes)} episodes")
    pooled = ConfusionMatrix.empty(episodes[0].way + 1)
    for ep, ps in zip(episodes, preds):
        for q, p in zip(ep.query, ps):
            pooled = accumulate(pooled, q.labels, p)
    _, m = miou(pooled)
    gious = iou_per_class(global_confusion(episodes, preds, alphabet))
    per_class = {alphabet.names[c]: (None if np.isnan(gious[c]) else float(gious[c]))
                 for c in range(len(alphabet)) if c != alphabet.background_index}
    return RunOutcome(m, per_class)


def summarize_runs(setting, outcomes):
    """Best and mean mIoU over runs; per-class IoU averaged over runs where defined."""
    if not outcomes:
        raise ParameterError("need at least one run")
    scores = [o.miou for o in outcomes]
    names = list(outcomes[0].per_class)
    per_class = {}
    for n in names:
        vals = [o.per_class[n] for o in outcomes if o.per_class.get(n) is not None]
        per_class[n] = float(np.mean(vals)) if vals else None
    return {"setting": setting, "runs": [float(s) for s in scores], "best_miou": float(max(scores)),
            "mean_miou": float(np.mean(scores)), "per_class": per_class}


def setting_name(way, shot):
    return f"{way}-way {shot}-shot"


def build_report(method, summaries):
    return {"method": method, "settings": list(summaries)}


def validate_report(report):
    import jsonschema
    jsonschema.validate(report, REPORT_SCHEMA)
    return report


def format_table(reports):
    """Plain-text table: one row per method, best / mean mIoU (%) per setting."""
    settings = []
    for r in reports:
        for s in r["settings"]:
            if s["setting"] not in settings:
                settings.append(s["setting"])
    head = ["Method"]
    for s in settings:
        head += [f"{s} best", f"{s} mean"]
    rows = [head]
    for r in reports:
        by = {s["setting"]: s for s in r["settings"]}
        row = [r["method"]]
        for s in settings:
            if s in by:
                row += [f"{100 * by[s]['best_miou']:.2f}", f"{100 * by[s]['mean_miou']:.2f}"]
            else:
                row += ["-", "-"]
        rows.append(row)
    widths = [max(len(r[i]) for r in rows) for i in range(len(head))]
    lines = [" | ".join(c.ljust(w) for c, w in zip(r, widths)) for r in rows]
    lines.insert(1, "-+-".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def dump_report(report, path):
    with open(path, "w") as fh:
        json.dump(report, fh, indent=1, sort_keys=False)
        fh.write("\n")
