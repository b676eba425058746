"""``pseg`` command line: synth | split | pretrain | train | segment | eval | gradcheck.

Every command takes ``--config PATH``, ``--seed N``, ``--threads N``, ``--out DIR``
and ``--<dotted.key> VALUE`` overrides for any key of the run configuration.
Outputs are written to a staging directory and moved into ``--out`` only when
the command succeeds; the effective configuration is echoed as ``config.toml``.
Failures print one ``error_code: message`` line to stderr and exit nonzero.
"""

import argparse
import json
import logging
import os
import shutil
import sys
from contextlib import contextmanager
from pathlib import Path

from . import config as cfgmod
from .errors import ConfigError, PsegError

log = logging.getLogger("pseg")

COMMANDS = ("synth", "split", "pretrain", "train", "segment", "eval", "gradcheck")
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS")


class GradcheckFailed(PsegError):
    code = "gradcheck_failed"


# ----------------------------------------------------------------- arguments


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _parser():
    p = _Parser(prog="pseg", description="Few-shot point-cloud segmentation pipelines.", allow_abbrev=False)
    sub = p.add_subparsers(dest="command", required=True, metavar="command", parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name, help=f"run the {name} stage", allow_abbrev=False,
                           epilog="Any configuration key can be overridden as --<key> VALUE, e.g. --train.lambda 0.")
        s.add_argument("--config", help="TOML file with dotted configuration keys")
        s.add_argument("--seed", type=int, help="top-level seed")
        s.add_argument("--threads", type=int, help="worker threads (1 gives bit-reproducible runs)")
        s.add_argument("--out", help="output directory")
    return p


def parse_overrides(extra):
    """``--key value`` / ``--key=value`` pairs for configuration keys."""
    out = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key, eq, value = tok[2:].partition("=")
        if not eq:
            if i + 1 >= len(extra):
                raise ConfigError(f"missing value for --{key}")
            value = extra[i + 1]
            i += 1
        out[key] = cfgmod.parse_flag_value(key, value)
        i += 1
    return out


def resolve_config(args, extra):
    file_values = cfgmod.load(args.config) if args.config else {}
    overrides = parse_overrides(extra)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.threads is not None:
        overrides["threads"] = args.threads
    threads = overrides.get("threads", file_values.get("threads", cfgmod.DEFAULTS["threads"]))
    if isinstance(threads, int) and threads >= 1:
        # before numpy/numba load their thread pools
        for var in _THREAD_VARS:
            os.environ.setdefault(var, str(threads))
    return cfgmod.effective(file_values, overrides)


def _setup_logging():
    level = os.environ.get("PSEG_LOG", "info").strip().lower()
    if level not in LOG_LEVELS:
        raise ConfigError(f"PSEG_LOG must be one of {'|'.join(LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=LOG_LEVELS[level], stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s",
                        force=True)


@contextmanager
def staged(out):
    """Yield a scratch directory next to ``out``; on success its entries replace those in ``out``."""
    out = Path(out)
    stage = out.parent / f".{out.name}.partial"
    if stage.exists():
        shutil.rmtree(stage)
    stage.mkdir(parents=True)
    try:
        yield stage
    except BaseException:
        shutil.rmtree(stage, ignore_errors=True)
        raise
    out.mkdir(parents=True, exist_ok=True)
    for entry in sorted(stage.iterdir()):
        target = out / entry.name
        if target.is_dir() and not target.is_symlink():
            shutil.rmtree(target)
        os.replace(entry, target)
    stage.rmdir()


def _need(cfg, key):
    if not cfg[key]:
        raise ConfigError(f"{key} is required for this command")
    return cfg[key]


def _write_json(path, doc):
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


# ------------------------------------------------------------------ loaders


def _corpus(cfg):
    from .plyio import load_corpus
    return load_corpus(_need(cfg, "paths.corpus"))


def _split(cfg):
    from .episodes import SplitConfig
    from .errors import FormatError
    path = _need(cfg, "paths.split")
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise FormatError(f"{path}: {exc}") from None
    return SplitConfig.from_dict(doc)


def _params(cfg, path=None):
    """Parameters from a checkpoint, or a seeded random init when no checkpoint is given."""
    from . import fen, trainer
    from .seeding import derive_seed
    path = path if path is not None else cfg["paths.checkpoint"]
    if path:
        state = trainer.load_state(path)
        want = cfgmod.fen_config(cfg)
        if state.params.config != want:
            log.info("using the architecture stored in %s", path)
        return state.params
    log.info("no checkpoint given: random initialization")
    return fen.init_params(cfgmod.fen_config(cfg), derive_seed(cfg["seed"], "init"))


# ----------------------------------------------------------------- commands


def cmd_synth(cfg, out):
    from . import synth
    from .plyio import save_corpus
    from .seeding import derive_seed
    if cfg["paths.specs"]:
        specs = synth.load_specs(cfg["paths.specs"])
    else:
        specs = synth.random_specs(cfg["synth.count"], cfg["seed"], cfg["synth.points"], cfg["synth.noise"])
    corpus = synth.generate_corpus(specs, cfg["synth.clouds_per_spec"], derive_seed(cfg["seed"], "synth"))
    synth.dump_specs(specs, out / "specs.json")
    doc = save_corpus(out, corpus)
    totals = {}
    for e in doc["clouds"]:
        for k, v in e["histogram"].items():
            totals[k] = totals.get(k, 0) + v
    print(f"{len(corpus)} clouds; points per class: " + ", ".join(f"{k}={v}" for k, v in totals.items()))


def cmd_split(cfg, out):
    import numpy as np
    from .episodes import split_classes
    from .errors import SamplingError
    corpus = _corpus(cfg)
    alphabet = corpus[0].alphabet
    split = split_classes(alphabet, cfg["split.fold"], cfg["seed"])
    holders = np.array([lc.histogram() > 0 for lc in corpus]).sum(axis=0)
    for c in split.train_classes + split.test_classes:
        if holders[c] == 0:
            raise SamplingError(f"class {alphabet.names[c]!r} does not occur in the corpus")
    doc = split.to_dict()
    doc["clouds_per_class"] = {alphabet.names[c]: int(holders[c]) for c in range(len(alphabet))}
    _write_json(out / "split.json", doc)
    print("train:", ", ".join(alphabet.names[c] for c in split.train_classes))
    print("test: ", ", ".join(alphabet.names[c] for c in split.test_classes))


def cmd_pretrain(cfg, out):
    from . import trainer
    corpus = _corpus(cfg)
    split = _split(cfg)
    params = _params(cfg) if cfg["paths.checkpoint"] else None
    res = trainer.run_pretraining(corpus, split, cfgmod.pretrain_config(cfg), params=params, out_dir=out,
                                  fen_config=cfgmod.fen_config(cfg))
    last = res.log[-1] if res.log else None
    print(f"pretrained {len(res.log)} steps" + (f"; final loss {last.total:.6g}" if last else ""))


def cmd_train(cfg, out):
    from . import trainer
    corpus = _corpus(cfg)
    split = _split(cfg)
    params = _params(cfg)
    if cfg["paths.checkpoint"] and "pretrain_head.w" in trainer.load_state(cfg["paths.checkpoint"]).extra:
        # starting from a pretrained extractor: the classifier is dropped and the head starts over
        params = trainer.fresh_head(params, cfg["seed"])
    res = trainer.run_training(corpus, split, cfgmod.train_config(cfg), params=params, out_dir=out)
    last = res.log[-1] if res.log else None
    print(f"trained {len(res.log)} iterations" + (f"; final loss {last.total:.6g}" if last else ""))


def _test_episodes(cfg, corpus, split, shot, purpose):
    from .episodes import episode_stream
    from .seeding import derive_seed
    return list(episode_stream(corpus, split, cfg["eval.way"], shot, cfg["eval.queries"], cfg["eval.episodes"],
                               derive_seed(cfg["seed"], purpose, shot), "test"))


def cmd_segment(cfg, out):
    import csv

    import numpy as np

    from . import evalkit, trainer
    from .episodes import episode_manifest, episodes_from_manifest
    from .errors import FormatError
    from .geom import LabeledPointCloud
    from .plyio import write_ply

    corpus = _corpus(cfg)
    if cfg["paths.episodes"]:
        try:
            doc = json.loads(Path(cfg["paths.episodes"]).read_text())
        except (OSError, ValueError) as exc:
            raise FormatError(f"{cfg['paths.episodes']}: {exc}") from None
        episodes = episodes_from_manifest(doc, corpus)
    else:
        episodes = _test_episodes(cfg, corpus, _split(cfg), cfg["eval.shots"][0], "segment")
    params = _params(cfg, _need(cfg, "paths.checkpoint"))
    cache = trainer.FeatureCache(corpus, params)
    alphabet = corpus[0].alphabet
    names = alphabet.names

    all_preds, records, rows = [], [], []
    pred_dir = out / "predictions"
    pred_dir.mkdir()
    for ep in episodes:
        preds = evalkit.segment_with_features(ep, cache.features, cfg["proto.n_p"], cfgmod.lpa_config(cfg))
        all_preds.append(preds)
        table = np.array([alphabet.background_index] + list(ep.classes), dtype=np.int64)
        queries = []
        for j, (q, p) in enumerate(zip(ep.query, preds)):
            lc = corpus[q.cloud]
            fname = f"ep{ep.index:04d}_q{j}_{lc.name}.ply"
            write_ply(pred_dir / fname, LabeledPointCloud(lc.cloud, table[p], alphabet, lc.name))
            queries.append({"file": lc.name + ".ply", "prediction": f"predictions/{fname}"})
        records.append({"index": ep.index, "queries": queries})
        ious, m = evalkit.episode_miou(ep, preds)
        for lab, v in enumerate(ious):
            rows.append([ep.index, names[table[lab]], repr(float(v))])
        rows.append([ep.index, "mIoU", repr(m)])

    _write_json(out / "episodes.json", episode_manifest(episodes, corpus))
    _write_json(out / "predictions.json", {"version": 1, "episodes": records})
    with open(out / "episode_iou.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["episode", "class", "iou"])
        w.writerows(rows)
    outcome = evalkit.evaluate_predictions(episodes, all_preds, alphabet)
    _write_json(out / "summary.json", {"episodes": len(episodes), "miou": outcome.miou,
                                       "per_class": outcome.per_class})
    print(f"segmented {len(episodes)} episodes; pooled mIoU {outcome.miou:.6f}")


def _eval_predictions(cfg, corpus):
    """One run from ``segment`` outputs: episodes.json + predictions.json + labeled PLYs."""
    from . import evalkit
    from .episodes import episodes_from_manifest, remap_labels
    from .errors import FormatError
    from .plyio import read_ply

    root = Path(cfg["paths.predictions"])
    try:
        episodes = episodes_from_manifest(json.loads((root / "episodes.json").read_text()), corpus)
        records = json.loads((root / "predictions.json").read_text())["episodes"]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{root}: unreadable prediction set ({exc})") from None
    if len(records) != len(episodes):
        raise FormatError(f"{root}: {len(records)} prediction records for {len(episodes)} episodes")
    alphabet = corpus[0].alphabet
    preds = []
    for ep, rec in zip(episodes, records):
        if len(rec["queries"]) != len(ep.query):
            raise FormatError(f"{root}: episode {ep.index} has {len(rec['queries'])} predictions")
        ps = []
        for q, entry in zip(ep.query, rec["queries"]):
            lc = read_ply(root / entry["prediction"], alphabet)
            if len(lc) != len(q.labels):
                raise FormatError(f"{entry['prediction']}: {len(lc)} points, query has {len(q.labels)}")
            ps.append(remap_labels(lc.labels, ep.classes, len(alphabet)))
        preds.append(ps)
    outcome = evalkit.evaluate_predictions(episodes, preds, alphabet)
    setting = evalkit.setting_name(episodes[0].way, episodes[0].shot)
    return [evalkit.summarize_runs(setting, [outcome])]


def cmd_eval(cfg, out):
    from . import evalkit, trainer

    corpus = _corpus(cfg)
    if cfg["paths.predictions"]:
        summaries = _eval_predictions(cfg, corpus)
    else:
        split = _split(cfg)
        ckpts = list(cfg["paths.checkpoints"]) or ([cfg["paths.checkpoint"]] if cfg["paths.checkpoint"] else [""])
        caches = [trainer.FeatureCache(corpus, _params(cfg, c)) for c in ckpts]
        summaries = []
        for shot in cfg["eval.shots"]:
            episodes = _test_episodes(cfg, corpus, split, shot, "eval")
            runs = [evalkit.evaluate_run(episodes, c.features, corpus[0].alphabet, cfg["proto.n_p"],
                                         cfgmod.lpa_config(cfg)) for c in caches]
            summaries.append(evalkit.summarize_runs(evalkit.setting_name(cfg["eval.way"], shot), runs))
            log.info("%d-shot: mean mIoU %.4f over %d runs", shot, summaries[-1]["mean_miou"], len(runs))
    report = evalkit.validate_report(evalkit.build_report(cfg["eval.method"], summaries))
    evalkit.dump_report(report, out / "report.json")
    table = evalkit.format_table([report])
    (out / "table.txt").write_text(table)
    sys.stdout.write(table)


def cmd_gradcheck(cfg, out):
    from .gradsuite import run_suite
    results = run_suite(h=cfg["gradcheck.h"], seed=cfg["seed"])
    lines = [f"{r.suite}/{r.name} {r.max_error:.3e} ({r.seconds:.2f}s)" for r in results]
    worst = max(r.max_error for r in results)
    lines.append(f"max_error {worst:.3e}")
    print("\n".join(lines))
    if out is not None:
        (out / "gradcheck.txt").write_text("\n".join(lines) + "\n")
    if not worst <= cfg["gradcheck.tol"]:
        raise GradcheckFailed(f"max relative error {worst:.3e} exceeds {cfg['gradcheck.tol']:.1e}")


HANDLERS = {"synth": cmd_synth, "split": cmd_split, "pretrain": cmd_pretrain, "train": cmd_train,
            "segment": cmd_segment, "eval": cmd_eval, "gradcheck": cmd_gradcheck}


def run(argv=None):
    args, extra = _parser().parse_known_args(argv)
    cfg = resolve_config(args, extra)
    _setup_logging()
    from . import kernels
    kernels.set_threads(cfg["threads"])
    handler = HANDLERS[args.command]
    if args.out is None:
        if args.command != "gradcheck":
            raise ConfigError("--out is required")
        handler(cfg, None)
        return
    with staged(args.out) as stage:
        cfgmod.dump(cfg, stage / "config.toml")
        handler(cfg, stage)


def main(argv=None):
    try:
        run(argv)
    except PsegError as exc:
        msg = " ".join(str(exc).split())
        print(f"{exc.code}: {msg}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"io_error: {' '.join(str(exc).split())}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        print("interrupted: stopped by user", file=sys.stderr)
        return 130
    return 0


if __name__ == "__main__":
    sys.exit(main())
