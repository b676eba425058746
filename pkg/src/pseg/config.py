"""Flat dotted-key run configuration (TOML subset) with validation and echo.

Every key has a default below; files and ``--key value`` flags may only set
known keys.  ``dump`` writes the effective configuration back in a form that
``load`` reads to the identical dict.
"""

import json
import math

from .errors import ConfigError, PsegError

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

DEFAULTS = {
    "seed": 0,
    "threads": 1,
    "paths.specs": "",
    "paths.corpus": "",
    "paths.split": "",
    "paths.checkpoint": "",
    "paths.checkpoints": [],
    "paths.episodes": "",
    "paths.predictions": "",
    "synth.count": 40,
    "synth.points": 2048,
    "synth.clouds_per_spec": 1,
    "synth.noise": 0.0,
    "split.fold": 0,
    "model.tnet_widths": [32, 64],
    "model.tnet_fc": 32,
    "model.edgeconv_widths": [64, 64, 64],
    "model.k_neighbors": 20,
    "model.attn_dim": 64,
    "model.head_widths": [128, 64],
    "model.negative_slope": 0.2,
    "pretrain.steps": 2000,
    "pretrain.batch": 4,
    "pretrain.points": 512,
    "pretrain.sampling": "crop",
    "pretrain.optimizer": "sgd",
    "pretrain.lr": 1e-3,
    "pretrain.momentum": 0.9,
    "pretrain.clip_norm": 1.0,
    "pretrain.checkpoint_every": 500,
    "train.iterations": 1000,
    "train.lambda": 0.9,
    "train.optimizer": "sgd",
    "train.lr": 1e-3,
    "train.momentum": 0.9,
    "train.clip_norm": 1.0,
    "train.way": 2,
    "train.shot": 1,
    "train.queries": 1,
    "train.center_rate": 0.5,
    "train.unfreeze_attention": False,
    "train.checkpoint_every": 100,
    "proto.n_p": 10,
    "lpa.k": 10,
    "lpa.alpha": 0.99,
    "lpa.sigma": "adaptive",
    "eval.way": 2,
    "eval.shots": [1, 3, 5],
    "eval.queries": 1,
    "eval.episodes": 100,
    "eval.method": "ours",
    "gradcheck.h": 1e-5,
    "gradcheck.tol": 1e-4,
}


def _flatten(d, prefix=""):
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _coerce(key, value):
    """Check ``value`` against the type of the default for ``key``; ints are accepted for floats."""
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key {key!r}")
    ref = DEFAULTS[key]
    if key == "lpa.sigma":
        if value == "adaptive":
            return value
        if isinstance(value, (int, float)) and not isinstance(value, bool) and value > 0:
            return float(value)
        raise ConfigError("lpa.sigma must be 'adaptive' or a positive number")
    if isinstance(ref, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be a boolean")
        return value
    if isinstance(ref, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer")
        return value
    if isinstance(ref, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number")
        return float(value)
    if isinstance(ref, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key} must be a string")
        return value
    if isinstance(ref, list):
        if not isinstance(value, list):
            raise ConfigError(f"{key} must be a list")
        kind = str if key.startswith("paths.") else int
        if not all(isinstance(v, kind) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{key} must be a list of {kind.__name__}s")
        return list(value)
    raise ConfigError(f"unsupported config key {key!r}")


def parse_flag_value(key, text):
    """Parse a command-line override by the type of the key's default."""
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key {key!r}")
    ref = DEFAULTS[key]
    try:
        if key == "lpa.sigma":
            return _coerce(key, text if text == "adaptive" else float(text))
        if isinstance(ref, bool):
            if text.lower() not in ("true", "false"):
                raise ValueError(text)
            return text.lower() == "true"
        if isinstance(ref, int):
            return int(text)
        if isinstance(ref, float):
            return float(text)
        if isinstance(ref, list):
            parts = [p.strip() for p in text.split(",") if p.strip()]
            return _coerce(key, parts if key.startswith("paths.") else [int(p) for p in parts])
        return text
    except ValueError:
        raise ConfigError(f"bad value {text!r} for {key}") from None


def loads(text, source="config"):
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return {k: _coerce(k, v) for k, v in _flatten(raw).items()}


def load(path):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return loads(text, str(path))


def effective(file_values=None, overrides=None):
    """Defaults, then file values, then overrides; validated."""
    cfg = dict(DEFAULTS)
    for src in (file_values or {}, overrides or {}):
        for k, v in src.items():
            cfg[k] = _coerce(k, v)
    validate(cfg)
    return cfg


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        r = repr(v)
        return r if any(c in r for c in ".en") else r + ".0"
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, list):
        return "[" + ", ".join(_fmt(x) for x in v) + "]"
    raise ConfigError(f"cannot serialize {v!r}")


def dumps(cfg):
    return "".join(f"{k} = {_fmt(cfg[k])}\n" for k in sorted(cfg))


def dump(cfg, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps(cfg))


# ------------------------------------------------------------------ validation


def validate(cfg):
    """Build every module config once so bad values fail before any work starts."""
    try:
        fen_config(cfg)
        train_config(cfg)
        pretrain_config(cfg)
        lpa_config(cfg)
    except PsegError as exc:
        raise ConfigError(str(exc)) from None
    checks = [
        ("threads", cfg["threads"] >= 1),
        ("synth.count", cfg["synth.count"] >= 1),
        ("synth.points", cfg["synth.points"] >= 1),
        ("synth.clouds_per_spec", cfg["synth.clouds_per_spec"] >= 1),
        ("synth.noise", cfg["synth.noise"] >= 0),
        ("split.fold", cfg["split.fold"] in (0, 1)),
        ("eval.way", cfg["eval.way"] >= 1),
        ("eval.shots", len(cfg["eval.shots"]) >= 1 and min(cfg["eval.shots"]) >= 1),
        ("eval.queries", cfg["eval.queries"] >= 1),
        ("eval.episodes", cfg["eval.episodes"] >= 1),
        ("gradcheck.h", cfg["gradcheck.h"] > 0),
        ("gradcheck.tol", cfg["gradcheck.tol"] > 0),
    ]
    for key, ok in checks:
        if not ok:
            raise ConfigError(f"invalid value for {key}: {cfg[key]!r}")
    return cfg


def fen_config(cfg):
    from .fen import FenConfig
    return FenConfig(tnet_widths=tuple(cfg["model.tnet_widths"]), tnet_fc=cfg["model.tnet_fc"],
                     edgeconv_widths=tuple(cfg["model.edgeconv_widths"]), k_neighbors=cfg["model.k_neighbors"],
                     attn_dim=cfg["model.attn_dim"], head_widths=tuple(cfg["model.head_widths"]),
                     negative_slope=cfg["model.negative_slope"])


def lpa_config(cfg):
    from .errors import ParameterError
    from .lpa import LpaConfig
    if not 0 <= cfg["lpa.alpha"] < 1:
        raise ParameterError("lpa.alpha must lie in [0, 1)")
    if cfg["lpa.k"] < 1:
        raise ParameterError("lpa.k must be >= 1")
    sigma = None if cfg["lpa.sigma"] == "adaptive" else cfg["lpa.sigma"]
    return LpaConfig(k=cfg["lpa.k"], alpha=cfg["lpa.alpha"], sigma=sigma)


def train_config(cfg, **changes):
    from .trainer import TrainConfig
    kw = dict(lam=cfg["train.lambda"], lr=cfg["train.lr"], momentum=cfg["train.momentum"],
              optimizer=cfg["train.optimizer"], iterations=cfg["train.iterations"], way=cfg["train.way"],
              shot=cfg["train.shot"], queries=cfg["train.queries"], n_p=cfg["proto.n_p"],
              center_rate=cfg["train.center_rate"], lpa=lpa_config(cfg), clip_norm=cfg["train.clip_norm"],
              unfreeze_attention=cfg["train.unfreeze_attention"], checkpoint_every=cfg["train.checkpoint_every"],
              seed=cfg["seed"])
    kw.update(changes)
    return TrainConfig(**kw)


def pretrain_config(cfg):
    from .trainer import PretrainConfig
    return PretrainConfig(steps=cfg["pretrain.steps"], batch=cfg["pretrain.batch"], points=cfg["pretrain.points"],
                          sampling=cfg["pretrain.sampling"], lr=cfg["pretrain.lr"],
                          momentum=cfg["pretrain.momentum"], optimizer=cfg["pretrain.optimizer"],
                          clip_norm=cfg["pretrain.clip_norm"], checkpoint_every=cfg["pretrain.checkpoint_every"],
                          seed=cfg["seed"])
