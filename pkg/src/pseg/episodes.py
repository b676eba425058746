"""Class folds and C-way K-shot episode sampling.

Episodes refer to clouds by their index in the corpus (a list of
LabeledPointCloud).  Episode label 0 is always the background; the chosen
classes get 1..C in the order they were drawn.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, ParameterError, SamplingError
from .geom import CAD_CLASSES
from .seeding import derive_seed, rng_for

STAGES = ("train", "test")


@dataclass(frozen=True)
class SplitConfig:
    alphabet: object
    train_classes: tuple
    test_classes: tuple
    fold: int = 0
    seed: int = 0

    def __post_init__(self):
        tr, te = set(self.train_classes), set(self.test_classes)
        fg = set(range(len(self.alphabet))) - {self.alphabet.background_index}
        if not tr or not te or tr & te or tr | te != fg:
            raise ParameterError("train/test classes must be disjoint, non-empty and cover the foreground")

    def classes_for(self, stage):
        if stage not in STAGES:
            raise ParameterError(f"unknown stage {stage!r}")
        return self.train_classes if stage == "train" else self.test_classes

    def to_dict(self):
        return {"classes": list(self.alphabet.names), "background": self.alphabet.background_index,
                "fold": self.fold, "seed": self.seed,
                "train": [int(c) for c in self.train_classes], "test": [int(c) for c in self.test_classes]}

    @classmethod
    def from_dict(cls, d):
        from .geom import ClassAlphabet
        try:
            alphabet = ClassAlphabet(tuple(d["classes"]), int(d["background"]))
            return cls(alphabet, tuple(d["train"]), tuple(d["test"]), int(d["fold"]), int(d["seed"]))
        except (KeyError, TypeError) as exc:
            raise FormatError(f"bad split record: {exc}") from None


def split_classes(alphabet=CAD_CLASSES, fold=0, seed=0):
    """Shuffle the foreground classes with ``seed``; the first half trains in fold 0, the second in fold 1."""
    if fold not in (0, 1):
        raise ParameterError(f"fold must be 0 or 1, got {fold}")
    fg = [c for c in range(len(alphabet)) if c != alphabet.background_index]
    if len(fg) < 2:
        raise ParameterError("need at least two foreground classes to split")
    order = rng_for(seed, "split").permutation(fg)
    half = len(fg) // 2
    a, b = tuple(sorted(int(c) for c in order[:half])), tuple(sorted(int(c) for c in order[half:]))
    return SplitConfig(alphabet, a, b, fold, seed) if fold == 0 else SplitConfig(alphabet, b, a, fold, seed)


@dataclass
class SupportSample:
    cloud: int
    cls: int  # global class id represented by this slot
    mask: np.ndarray  # bool per point


@dataclass
class QuerySample:
    cloud: int
    labels: np.ndarray  # remapped to 0..C


@dataclass
class Episode:
    way: int
    shot: int
    classes: tuple  # global ids; episode label of classes[i] is i + 1
    support: list = field(default_factory=list)
    query: list = field(default_factory=list)
    stage: str = "train"
    index: int = 0

    @property
    def remap(self):
        return {int(c): i + 1 for i, c in enumerate(self.classes)}

    def support_for(self, episode_label):
        return [s for s in self.support if self.remap[s.cls] == episode_label]

    def check(self):
        for s in self.support:
            if s.mask.dtype != bool or not s.mask.any():
                raise SamplingError(f"support mask for class {s.cls} is empty")
        for q in self.query:
            if q.labels.min() < 0 or q.labels.max() > self.way:
                raise SamplingError("query label outside the episode alphabet")


def remap_labels(labels, classes, alphabet_size):
    """Global labels -> episode labels: classes[i] -> i + 1, everything else -> 0."""
    table = np.zeros(alphabet_size, np.int64)
    table[np.asarray(classes, dtype=np.int64)] = np.arange(1, len(classes) + 1)
    return table[labels]


def _presence(corpus, n_classes):
    return np.array([np.bincount(lc.labels, minlength=n_classes) > 0 for lc in corpus])


def _build(corpus, classes, support_picks, query_picks, way, shot, stage, index):
    n_classes = len(corpus[0].alphabet)
    support = [SupportSample(int(i), int(c), corpus[i].labels == c) for c, i in support_picks]
    query = [QuerySample(int(i), remap_labels(corpus[i].labels, classes, n_classes)) for i in query_picks]
    ep = Episode(way, shot, tuple(int(c) for c in classes), support, query, stage, index)
    ep.check()
    return ep


def sample_episode(corpus, split, C, K, N_Q=1, seed=0, stage="train", index=0, presence=None):
    """Draw C classes from the stage's fold, K support clouds per class and N_Q query clouds."""
    if C < 1 or K < 1 or N_Q < 1:
        raise ParameterError("C, K and N_Q must be positive")
    if not corpus:
        raise SamplingError("corpus is empty")
    pool = np.array(split.classes_for(stage), dtype=np.int64)
    if len(pool) < C:
        raise SamplingError(f"{stage} fold has {len(pool)} classes, episode needs {C}")
    rng = rng_for(seed, "episode")
    if presence is None:
        presence = _presence(corpus, len(split.alphabet))
    classes = rng.choice(pool, size=C, replace=False)

    support_picks = []
    for c in classes:
        holders = np.flatnonzero(presence[:, c])
        if len(holders) < K:
            raise SamplingError(f"class {split.alphabet.names[c]!r} appears in {len(holders)} clouds, need {K}")
        support_picks += [(c, i) for i in rng.choice(holders, size=K, replace=False)]

    used = {i for _, i in support_picks}
    candidates = [i for i in np.flatnonzero(presence[:, classes].any(axis=1)) if i not in used]
    if len(candidates) < N_Q:
        raise SamplingError(f"only {len(candidates)} query clouds contain the chosen classes, need {N_Q}")
    query_picks = rng.choice(np.array(candidates), size=N_Q, replace=False)
    return _build(corpus, classes, support_picks, query_picks, C, K, stage, index)


def episode_stream(corpus, split, C, K, N_Q, count, seed, stage="train", start=0):
    """Generator of ``count`` episodes; episode i uses a seed derived from (seed, stage, i)."""
    presence = _presence(corpus, len(split.alphabet)) if corpus else None
    for i in range(start, start + count):
        yield sample_episode(corpus, split, C, K, N_Q, derive_seed(seed, stage, i), stage, i, presence)


# --------------------------------------------------------------------- manifests


def episode_record(ep, corpus):
    names = corpus[0].alphabet.names
    return {
        "index": ep.index, "stage": ep.stage, "way": ep.way, "shot": ep.shot,
        "classes": [names[c] for c in ep.classes],
        "support": [{"file": corpus[s.cloud].name + ".ply", "class": names[s.cls]} for s in ep.support],
        "query": [{"file": corpus[q.cloud].name + ".ply",
                   "remap": {names[c]: i + 1 for i, c in enumerate(ep.classes)}} for q in ep.query],
    }


def episode_manifest(episodes, corpus):
    return {"version": 1, "episodes": [episode_record(ep, corpus) for ep in episodes]}


def episodes_from_manifest(doc, corpus):
    """Rebuild episodes from a manifest against a corpus whose clouds carry the listed file names."""
    by_file = {lc.name + ".ply": i for i, lc in enumerate(corpus)}
    names = list(corpus[0].alphabet.names) if corpus else []
    out = []
    try:
        for rec in doc["episodes"]:
            classes = [names.index(c) for c in rec["classes"]]
            support = [(names.index(s["class"]), by_file[s["file"]]) for s in rec["support"]]
            query = []
            for q in rec["query"]:
                if {names.index(c): int(v) for c, v in q["remap"].items()} != \
                        {c: i + 1 for i, c in enumerate(classes)}:
                    raise FormatError("query remap table disagrees with the episode classes")
                query.append(by_file[q["file"]])
            out.append(_build(corpus, classes, support, query, int(rec["way"]), int(rec["shot"]),
                              rec.get("stage", "test"), int(rec.get("index", len(out)))))
    except (KeyError, ValueError, TypeError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"bad episode manifest entry: {exc!r}") from None
    return out
