"""Pretraining, episodic fine-tuning and checkpointing.

Fine-tuning only moves the head (and optionally the attention block), so the
frozen part of the network is evaluated once per cloud and cached.  Every
step then runs the trainable tail on support and query clouds, builds
prototypes, propagates labels and backpropagates

    total = L_m + lambda * L_c + L_reg

through the closed-form propagation into the trainable tensors.
"""

import csv
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import checkpoint
from . import diffcore as dc
from . import fen, proto
from .episodes import episode_stream
from .errors import FormatError, NumericError, ParameterError
from .geom import normalize_labeled, random_subsample
from .lpa import LpaConfig, cross_entropy_t, initial_labels, propagate_t
from .seeding import derive_seed, rng_for

log = logging.getLogger(__name__)

LOG_HEADER = ("iter", "l_m", "l_c", "l_reg", "total")


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.9
    lr: float = 1e-3
    momentum: float = 0.9  # SGD momentum, or Adam's beta1
    optimizer: str = "sgd"
    iterations: int = 1000
    way: int = 2
    shot: int = 1
    queries: int = 1
    n_p: int = proto.DEFAULT_N_PROTOTYPES
    center_rate: float = proto.DEFAULT_CENTER_RATE
    lpa: LpaConfig = LpaConfig()
    clip_norm: float = 1.0  # global gradient-norm cap; 0 disables
    unfreeze_attention: bool = False
    checkpoint_every: int = 100
    seed: int = 0

    def __post_init__(self):
        if not self.lam >= 0:
            raise ParameterError(f"lambda must be >= 0, got {self.lam}")
        if not self.lr > 0:
            raise ParameterError(f"learning rate must be > 0, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ParameterError("momentum must lie in [0, 1)")
        if not self.clip_norm >= 0:
            raise ParameterError("clip_norm must be >= 0")
        if self.optimizer not in OPTIMIZERS:
            raise ParameterError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.iterations < 0 or self.checkpoint_every < 0:
            raise ParameterError("iteration counts must be non-negative")
        if min(self.way, self.shot, self.queries, self.n_p) < 1:
            raise ParameterError("way, shot, queries and n_p must be positive")

    @property
    def trainable(self):
        return ("attention", "head") if self.unfreeze_attention else ("head",)


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 2000
    batch: int = 4
    points: int = 512
    sampling: str = "crop"  # "crop": nearest points around a random seed; "random": uniform subsample
    lr: float = 1e-3
    momentum: float = 0.9
    optimizer: str = "sgd"
    clip_norm: float = 1.0
    checkpoint_every: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0 or self.batch < 1 or self.points < 1:
            raise ParameterError("pretrain steps >= 0, batch >= 1 and points >= 1 required")
        if self.sampling not in ("crop", "random"):
            raise ParameterError(f"sampling must be 'crop' or 'random', got {self.sampling!r}")
        if not self.lr >= 0:
            raise ParameterError(f"learning rate must be >= 0, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ParameterError("momentum must lie in [0, 1)")
        if not self.clip_norm >= 0:
            raise ParameterError("clip_norm must be >= 0")
        if self.optimizer not in OPTIMIZERS:
            raise ParameterError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")


@dataclass(frozen=True)
class StepLosses:
    l_m: float
    l_c: float
    l_reg: float
    total: float

    def row(self, it):
        return [str(int(it))] + [repr(float(v)) for v in (self.l_m, self.l_c, self.l_reg, self.total)]


# ------------------------------------------------------------------ optimizer


def clip_gradients(grads, max_norm):
    """Rescale all gradients together so their joint L2 norm is at most ``max_norm`` (0: no-op)."""
    if not max_norm:
        return grads
    norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm <= max_norm:
        return grads
    c = max_norm / norm
    return {k: g * c for k, g in grads.items()}


def sgd_update(tensors, grads, velocity, lr, momentum):
    """Heavy-ball SGD: v <- momentum v + g; p <- p - lr v.  Only names in ``grads`` change.

    Returns (new tensors, new velocity); untouched arrays are shared, not copied.
    """
    new_t = dict(tensors)
    new_v = dict(velocity)
    for name, grad in grads.items():
        v = momentum * velocity[name] + grad if name in velocity else grad.copy()
        new_v[name] = v
        new_t[name] = tensors[name] - lr * v
    return new_t, new_v


def adam_update(tensors, grads, state, lr, beta1, beta2=0.999, eps=1e-8):
    """Adam with bias correction; ``state`` holds ``m/<name>``, ``s/<name>`` and the step count ``t``."""
    new_t = dict(tensors)
    new_s = dict(state)
    t = int(state["t"][0]) + 1 if "t" in state else 1
    new_s["t"] = np.array([float(t)])
    c1, c2 = 1.0 - beta1 ** t, 1.0 - beta2 ** t
    for name, grad in grads.items():
        m = beta1 * state.get(f"m/{name}", 0.0) + (1.0 - beta1) * grad
        v = beta2 * state.get(f"s/{name}", 0.0) + (1.0 - beta2) * grad * grad
        new_s[f"m/{name}"], new_s[f"s/{name}"] = m, v
        new_t[name] = tensors[name] - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return new_t, new_s


OPTIMIZERS = ("sgd", "adam")


def optimizer_update(tensors, grads, state, config):
    """Clip, then apply the configured optimizer (``config.optimizer``, ``lr``, ``momentum``)."""
    grads = clip_gradients(grads, config.clip_norm)
    if config.optimizer == "adam":
        return adam_update(tensors, grads, state, config.lr, config.momentum)
    return sgd_update(tensors, grads, state, config.lr, config.momentum)


def _check_finite(value, what):
    if not np.isfinite(value):
        raise NumericError(f"non-finite {what} ({value})")


# --------------------------------------------------------------- feature cache


class FeatureCache:
    """Per-cloud outputs of the frozen part of the network.

    Stores, per corpus index, the trunk output (before attention), the
    attention output and the predicted transform.  Valid as long as the tnet,
    edgeconv and (when used) attention tensors do not change.
    """

    def __init__(self, corpus, params, through_attention=True):
        self.corpus = corpus
        self.params = params
        self.through_attention = through_attention
        self._store = {}

    def get(self, i):
        if i not in self._store:
            g = dc.Graph()
            P = self.params.bind(g, trainable=())
            cloud = normalize_labeled(self.corpus[i]).cloud
            x, A = fen.trunk_forward(g, P, cloud, self.params.config)
            if self.through_attention:
                x = fen.attention_forward(g, P, x)
            self._store[i] = (np.array(x.value), np.array(A.value))
            g.release()
        return self._store[i]

    def features(self, i, params=None):
        """Final per-point features of cloud ``i`` with ``params``' head (frozen part from the cache)."""
        params = params or self.params
        g = dc.Graph()
        P = params.bind(g, trainable=())
        x = g.constant(self.get(i)[0])
        if not self.through_attention:
            x = fen.attention_forward(g, P, x)
        out = np.array(fen.head_forward(g, P, x, params.config).value)
        g.release()
        return out


# ------------------------------------------------------------------ fine-tune


def _center_keys(episode, labels, background):
    table = np.array([background] + list(episode.classes), dtype=np.int64)
    return table[labels]


def episode_loss(g, P, params, episode, corpus, config, centers, cache):
    """Build the episode loss on ``g``.

    Returns (L_m, L_c, L_reg, total, query features, center keys, centers); the
    returned centers include first-seen classes initialized to their batch mean.
    With ``cache=None`` the whole network runs on ``g`` (slow; used for gradient checks).
    """
    cfg = params.config
    order = list(dict.fromkeys([s.cloud for s in episode.support] + [q.cloud for q in episode.query]))
    feats, regs = {}, []
    for ci in order:
        if cache is None:
            feats[ci], A = fen.forward(g, P, normalize_labeled(corpus[ci]).cloud, cfg)
            regs.append(fen.reg_loss_t(A))
            continue
        pre, A = cache.get(ci)
        x = g.constant(pre)
        if not cache.through_attention:
            x = fen.attention_forward(g, P, x)
        feats[ci] = fen.head_forward(g, P, x, cfg)
        regs.append(fen.reg_loss_t(g.constant(A)))

    class_rows = {c: [] for c in range(episode.way + 1)}
    offset = 0
    for s in episode.support:
        class_rows[episode.remap[s.cls]].append(offset + np.flatnonzero(s.mask))
        class_rows[0].append(offset + np.flatnonzero(~s.mask))
        offset += len(s.mask)
    class_rows = {c: np.concatenate(r) for c, r in class_rows.items()}
    class_rows = {c: r for c, r in class_rows.items() if len(r)}
    sup = dc.concat([feats[s.cloud] for s in episode.support], axis=0)
    protos, tags = proto.prototypes_t(sup, class_rows, config.n_p)

    Q = dc.concat([feats[q.cloud] for q in episode.query], axis=0)
    truth = np.concatenate([q.labels for q in episode.query])
    n_l, n_q = protos.shape[0], Q.shape[0]
    nodes = dc.concat([protos, Q], axis=0)
    Y = initial_labels(tags, n_q, episode.way + 1)
    Z = propagate_t(nodes, Y, config.lpa.k, config.lpa.alpha, config.lpa.sigma)
    H = dc.softmax_rows(dc.gather_rows(Z, np.arange(n_l, n_l + n_q)))
    l_m = cross_entropy_t(H, truth, len(episode.query), n_q / len(episode.query))

    keys = _center_keys(episode, truth, corpus[0].alphabet.background_index)
    centers = _with_new_centers(centers, Q.value, keys)
    l_c = proto.center_loss_t(Q, keys, centers)
    l_reg = regs[0]
    for r in regs[1:]:
        l_reg = dc.add(l_reg, r)
    l_reg = dc.scale(l_reg, 1.0 / len(regs))
    total = dc.add(dc.add(l_m, dc.scale(l_c, config.lam)), l_reg)
    return l_m, l_c, l_reg, total, Q, keys, centers


def _with_new_centers(centers, features, keys):
    missing = sorted(set(np.unique(keys).tolist()) - set(centers.centers))
    if not missing:
        return centers
    add = proto.init_centers(features[np.isin(keys, missing)], keys[np.isin(keys, missing)], centers.rate)
    merged = dict(centers.centers)
    merged.update(add.centers)
    return proto.ClassCenters(merged, centers.rate)


@dataclass
class StepResult:
    losses: StepLosses
    params: fen.ModelParams
    centers: proto.ClassCenters
    opt_state: dict


def finetune_step(params, centers, episode, corpus, config=TrainConfig(), opt_state=None, cache=None):
    """One SGD step on an episode; frozen tensors are passed through untouched."""
    if cache is None:
        cache = FeatureCache(corpus, params, through_attention=not config.unfreeze_attention)
    centers = centers if centers is not None else proto.ClassCenters({}, config.center_rate)
    g = dc.Graph()
    P = params.bind(g, trainable=config.trainable)
    l_m, l_c, l_reg, total, Q, keys, centers = episode_loss(g, P, params, episode, corpus, config, centers, cache)
    losses = StepLosses(float(l_m.value), float(l_c.value), float(l_reg.value), float(total.value))
    _check_finite(losses.total, f"fine-tune loss (L_m={losses.l_m}, L_c={losses.l_c}, L_reg={losses.l_reg})")
    grads = g.backward(total)
    named = {name: grads[t] for name, t in P.items() if t.requires_grad}
    g.release()
    tensors, opt_state = optimizer_update(params.tensors, named, opt_state or {}, config)
    new_centers = proto.update_centers(centers, Q.value, keys)
    return StepResult(losses, fen.ModelParams(params.config, tensors), new_centers, opt_state)


def fresh_head(params, seed):
    """Copy of ``params`` with the head layers re-initialized (fine-tuning starts from a new head)."""
    new = fen.init_params(params.config, derive_seed(seed, "fresh-head"))
    tensors = {k: (new.tensors[k] if params.group_of(k) == "head" else v.copy()) for k, v in params.tensors.items()}
    return fen.ModelParams(params.config, tensors)


# ---------------------------------------------------------------- checkpoints


def _arch_tensors(config):
    out = {}
    for f in fields(config):
        v = getattr(config, f.name)
        out[f"arch/{f.name}"] = np.atleast_1d(np.asarray(v, dtype=np.float64))
    return out


def _arch_from(tensors):
    kw = {}
    for f in fields(fen.FenConfig):
        key = f"arch/{f.name}"
        if key not in tensors:
            raise FormatError(f"checkpoint lacks {key}")
        v = tensors[key]
        if isinstance(f.default, tuple):
            kw[f.name] = tuple(int(x) for x in v)
        elif isinstance(f.default, float):
            kw[f.name] = float(v[0])
        else:
            kw[f.name] = int(v[0])
    return fen.FenConfig(**kw)


@dataclass
class TrainState:
    params: fen.ModelParams
    centers: proto.ClassCenters = None
    opt_state: dict = field(default_factory=dict)
    iteration: int = 0
    extra: dict = field(default_factory=dict)  # e.g. the pretrain classifier

    def tensors(self):
        t = dict(self.params.tensors)
        t.update(_arch_tensors(self.params.config))
        if self.centers is not None:
            t["centers/rate"] = np.array([self.centers.rate])
            for c, v in self.centers.centers.items():
                t[f"centers/{int(c)}"] = v
        for name, v in self.opt_state.items():
            t[f"opt/{name}"] = v
        for name, v in self.extra.items():
            t[f"extra/{name}"] = v
        return t


def save_state(path, state):
    return checkpoint.save(path, state.tensors(), state.iteration)


def load_state(path):
    tensors, iteration = checkpoint.load(path)
    config = _arch_from(tensors)
    params, opt_state, extra, centers = {}, {}, {}, {}
    rate = None
    for name, v in tensors.items():
        prefix, _, rest = name.partition("/")
        if not rest:
            params[name] = v
        elif prefix == "opt":
            opt_state[rest] = v
        elif prefix == "extra":
            extra[rest] = v
        elif prefix == "centers":
            if rest == "rate":
                rate = float(v[0])
            else:
                centers[int(rest)] = v
    expected = set(fen.init_params(config, 0).tensors)
    if set(params) != expected:
        raise FormatError(f"{path}: parameter names do not match the stored architecture")
    cc = proto.ClassCenters(centers, rate) if rate is not None else None
    return TrainState(fen.ModelParams(config, params), cc, opt_state, iteration, extra)


# --------------------------------------------------------------- training loop


def _write_log(path, rows, append):
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if not append:
            w.writerow(LOG_HEADER)
        w.writerows(rows)


def read_log(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != LOG_HEADER:
        raise FormatError(f"{path}: not a loss log")
    return [(int(r[0]),) + tuple(float(x) for x in r[1:]) for r in rows[1:]]


@dataclass
class TrainResult:
    state: TrainState
    log: list  # StepLosses per executed step
    cache: FeatureCache = None


def run_training(corpus, split, config=TrainConfig(), params=None, out_dir=None, resume=None):
    """Fine-tune on ``config.iterations`` training episodes.

    ``resume`` is a TrainState (or checkpoint path) to continue from; episodes
    are indexed by absolute iteration so a resumed run replays the same stream.
    With ``out_dir`` set, writes ``train_log.csv``, periodic ``ckpt_<iter>.pseg``
    files and ``final.pseg``.
    """
    if resume is not None:
        state = load_state(resume) if isinstance(resume, (str, Path)) else resume
    else:
        if params is None:
            raise ParameterError("run_training needs initial params or a state to resume")
        state = TrainState(params, proto.ClassCenters({}, config.center_rate), {}, 0)
    if state.centers is None:
        state.centers = proto.ClassCenters({}, config.center_rate)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "train_log.csv"
        if state.iteration == 0 or not log_path.exists():
            _write_log(log_path, [], append=False)
    cache = FeatureCache(corpus, state.params, through_attention=not config.unfreeze_attention)
    stream = episode_stream(corpus, split, config.way, config.shot, config.queries,
                            max(config.iterations - state.iteration, 0),
                            derive_seed(config.seed, "finetune"), "train", start=state.iteration)
    history = []
    params, centers, opt_state = state.params, state.centers, state.opt_state
    it = state.iteration
    for ep in stream:
        res = finetune_step(params, centers, ep, corpus, config, opt_state, cache)
        params, centers, opt_state = res.params, res.centers, res.opt_state
        it += 1
        history.append(res.losses)
        if out is not None:
            _write_log(log_path, [res.losses.row(it)], append=True)
            if config.checkpoint_every and it % config.checkpoint_every == 0:
                save_state(out / f"ckpt_{it:06d}.pseg", TrainState(params, centers, opt_state, it, state.extra))
        if it % 50 == 0:
            log.info("iter %d total %.6g (L_m %.4g, L_c %.4g, L_reg %.4g)", it, res.losses.total,
                     res.losses.l_m, res.losses.l_c, res.losses.l_reg)
    final = TrainState(params, centers, opt_state, it, state.extra)
    if out is not None:
        save_state(out / "final.pseg", final)
    return TrainResult(final, history, cache)


# ------------------------------------------------------------------- pretrain


def pretrain_loss(g, P, head_w, head_b, batch, config, ignore=()):
    """Mean per-point cross-entropy of a linear classifier plus mean L_reg over the batch.

    Points whose label is in ``ignore`` do not contribute to L_m.
    """
    ce_terms, reg_terms = [], []
    for lc in batch:
        feats, A = fen.forward(g, P, lc.cloud, config)
        keep = ~np.isin(lc.labels, list(ignore))
        reg_terms.append(dc.reshape(fen.reg_loss_t(A), (1, 1)))
        if not keep.any():
            continue
        logits = dc.add(dc.matmul(dc.gather_rows(feats, np.flatnonzero(keep)), head_w), head_b)
        H = dc.softmax_rows(logits)
        onehot = np.zeros(H.shape)
        onehot[np.arange(H.shape[0]), lc.labels[keep]] = 1.0
        picked = dc.reduce_sum(dc.mul(dc.log(H, 1e-12), g.constant(onehot)))
        ce_terms.append(dc.reshape(dc.scale(picked, -1.0 / H.shape[0]), (1, 1)))
    b = len(batch)
    l_m = dc.scale(dc.reduce_sum(dc.concat(ce_terms, axis=0)), 1.0 / b) if ce_terms else g.constant(0.0)
    l_reg = dc.scale(dc.reduce_sum(dc.concat(reg_terms, axis=0)), 1.0 / b)
    return l_m, l_reg, dc.add(l_m, l_reg)


def init_classifier(in_dim, n_classes, seed):
    rng = rng_for(seed, "pretrain-head")
    return {"pretrain_head.w": rng.normal(0.0, np.sqrt(1.0 / in_dim), size=(in_dim, n_classes)),
            "pretrain_head.b": np.zeros(n_classes)}


def pretrain_step(params, classifier, batch, config=PretrainConfig(), opt_state=None, ignore=()):
    """One optimizer step on all network tensors and the classifier; returns (losses, params, classifier, opt_state)."""
    if not batch:
        raise ParameterError("pretrain batch is empty")
    g = dc.Graph()
    P = params.bind(g)
    hw = g.leaf(classifier["pretrain_head.w"], name="pretrain_head.w")
    hb = g.leaf(classifier["pretrain_head.b"], name="pretrain_head.b")
    l_m, l_reg, total = pretrain_loss(g, P, hw, hb, batch, params.config, ignore)
    losses = StepLosses(float(l_m.value), 0.0, float(l_reg.value), float(total.value))
    _check_finite(losses.total, f"pretrain loss (L_m={losses.l_m}, L_reg={losses.l_reg})")
    grads = g.backward(total)
    named = {name: grads[t] for name, t in P.items()}
    named["pretrain_head.w"] = grads[hw]
    named["pretrain_head.b"] = grads[hb]
    g.release()
    both = dict(params.tensors)
    both.update(classifier)
    both, opt_state = optimizer_update(both, named, opt_state or {}, config)
    new_cls = {k: both.pop(k) for k in list(classifier)}
    return losses, fen.ModelParams(params.config, both), new_cls, opt_state


def crop(lc, n_points, rng_seed):
    """The ``n_points`` points nearest (in xyz) to a random seed point; keeps the cloud's density."""
    if n_points >= len(lc):
        return lc
    rng = np.random.default_rng(rng_seed)
    center = lc.cloud.xyz[rng.integers(len(lc))]
    d2 = ((lc.cloud.xyz - center) ** 2).sum(axis=1)
    return lc.take(np.sort(np.argsort(d2, kind="stable")[:n_points]))


def pretrain_batch(corpus, config, step):
    """Deterministic batch for ``step``: normalized clouds cut down to ``config.points``."""
    rng = rng_for(config.seed, "pretrain-batch", step)
    picks = rng.choice(len(corpus), size=min(config.batch, len(corpus)), replace=False)
    out = []
    for j, i in enumerate(picks):
        lc = normalize_labeled(corpus[int(i)])
        seed = derive_seed(config.seed, "pretrain-points", step, j)
        if config.points < len(lc):
            lc = crop(lc, config.points, seed) if config.sampling == "crop" else \
                random_subsample(lc, config.points, seed)
        out.append(lc)
    return out


def run_pretraining(corpus, split, config=PretrainConfig(), params=None, out_dir=None, fen_config=None):
    """Supervised pretraining on training-fold classes; test-fold points are left out of L_m."""
    params = params or fen.init_params(fen_config or fen.FenConfig(), derive_seed(config.seed, "init"))
    alphabet = corpus[0].alphabet
    classifier = init_classifier(params.config.out_dim, len(alphabet), config.seed)
    ignore = tuple(split.test_classes) if split is not None else ()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        _write_log(out / "pretrain_log.csv", [], append=False)
    opt_state, history = {}, []
    for step in range(config.steps):
        batch = pretrain_batch(corpus, config, step)
        losses, params, classifier, opt_state = pretrain_step(params, classifier, batch, config, opt_state, ignore)
        history.append(losses)
        if out is not None:
            _write_log(out / "pretrain_log.csv", [losses.row(step + 1)], append=True)
            if config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
                save_state(out / f"pretrain_{step + 1:06d}.pseg",
                           TrainState(params, None, {}, step + 1, dict(classifier)))
        if (step + 1) % 50 == 0:
            log.info("pretrain step %d loss %.6g", step + 1, losses.total)
    state = TrainState(params, None, {}, config.steps, dict(classifier))
    if out is not None:
        save_state(out / "pretrained.pseg", state)
    return TrainResult(state, history)
