"""Desk-scale end-to-end experiment: synthetic corpus, pretrain, fine-tune, evaluate.

One seed runs the whole protocol on its own corpus and class split:

* baseline: randomly initialized extractor, no training, 1-shot test episodes;
* pretrain on the training-fold classes, then fine-tune a fresh head on 2-way
  1-shot episodes with the full loss;
* evaluate the fine-tuned model on 1/3/5-shot test episodes of held-out classes;
* optionally fine-tune again with the center loss disabled (lambda = 0).
"""

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import fen, synth, trainer
from .episodes import episode_stream, split_classes
from .evalkit import evaluate_run
from .geom import CAD_CLASSES
from .seeding import derive_seed


@dataclass(frozen=True)
class DeskConfig:
    clouds: int = 40
    points: int = 2048
    fold: int = 0
    pretrain: trainer.PretrainConfig = trainer.PretrainConfig(steps=200)
    train: trainer.TrainConfig = trainer.TrainConfig(iterations=1000)
    model: fen.FenConfig = fen.FenConfig()
    eval_episodes: int = 40
    shots: tuple = (1, 3, 5)
    ablate_center_loss: bool = True


@dataclass
class SeedResult:
    seed: int
    baseline: float
    pretrained: float
    trained: dict  # shot -> mIoU
    no_center_loss: float = None
    seconds: dict = field(default_factory=dict)

    @property
    def pipeline_seconds(self):
        """Wall time of the 1-shot pipeline: data, baseline, pretrain, fine-tune, 1-shot eval."""
        return sum(self.seconds.get(k, 0.0) for k in ("data", "baseline", "pretrain", "train", "eval_1"))


def _evaluate(corpus, split, params, shot, count, seed, n_p, lpa_config, cache=None):
    episodes = list(episode_stream(corpus, split, 2, shot, 1, count, derive_seed(seed, "desk-eval", shot), "test"))
    cache = cache or trainer.FeatureCache(corpus, params)
    return evaluate_run(episodes, lambda i: cache.features(i, params), CAD_CLASSES, n_p, lpa_config).miou


def run_seed(seed, config=DeskConfig()):
    t = {}
    clock = time.perf_counter()

    def lap(name):
        nonlocal clock
        now = time.perf_counter()
        t[name] = now - clock
        clock = now

    specs = synth.random_specs(config.clouds, seed, config.points)
    corpus = synth.generate_corpus(specs, 1, derive_seed(seed, "synth"))
    split = split_classes(CAD_CLASSES, config.fold, seed)
    tc = replace(config.train, seed=seed)
    n_p, lpa = tc.n_p, tc.lpa
    lap("data")

    init = fen.init_params(config.model, derive_seed(seed, "init"))
    baseline = _evaluate(corpus, split, init, 1, config.eval_episodes, seed, n_p, lpa)
    lap("baseline")

    pre = trainer.run_pretraining(corpus, split, replace(config.pretrain, seed=seed), params=init).state.params
    lap("pretrain")
    start = trainer.fresh_head(pre, seed)
    res = trainer.run_training(corpus, split, tc, params=start)
    lap("train")

    trained = {}
    for shot in config.shots:
        trained[shot] = _evaluate(corpus, split, res.state.params, shot, config.eval_episodes, seed, n_p, lpa,
                                  res.cache)
        lap(f"eval_{shot}")
    pretrained = _evaluate(corpus, split, start, 1, config.eval_episodes, seed, n_p, lpa, res.cache)
    lap("eval_pretrained")

    no_center = None
    if config.ablate_center_loss:
        res0 = trainer.run_training(corpus, split, replace(tc, lam=0.0), params=start)
        no_center = _evaluate(corpus, split, res0.state.params, 1, config.eval_episodes, seed, n_p, lpa, res0.cache)
        lap("ablation")
    return SeedResult(seed, baseline, pretrained, trained, no_center, t)


def summarize(results):
    """Medians and means over seeds of every reported number."""
    out = {"baseline_median": float(np.median([r.baseline for r in results])),
           "pretrained_median": float(np.median([r.pretrained for r in results])),
           "pipeline_seconds": float(sum(r.pipeline_seconds for r in results))}
    for shot in results[0].trained:
        vals = [r.trained[shot] for r in results]
        out[f"trained_{shot}shot_median"] = float(np.median(vals))
        out[f"trained_{shot}shot_mean"] = float(np.mean(vals))
    if results[0].no_center_loss is not None:
        out["no_center_loss_mean"] = float(np.mean([r.no_center_loss for r in results]))
    return out


def main(seeds=range(5)):
    results = []
    for s in seeds:
        r = run_seed(s)
        results.append(r)
        print(f"seed {s}: baseline {r.baseline:.4f} pretrained {r.pretrained:.4f} "
              + " ".join(f"{k}-shot {v:.4f}" for k, v in r.trained.items())
              + (f" lambda0 {r.no_center_loss:.4f}" if r.no_center_loss is not None else "")
              + f" ({r.pipeline_seconds:.0f}s pipeline, {sum(r.seconds.values()):.0f}s total)", flush=True)
    for k, v in summarize(results).items():
        print(f"{k} {v:.4f}")
    return results


if __name__ == "__main__":
    main()
