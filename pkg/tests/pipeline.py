"""Run the full CLI pipeline on a tiny configuration."""

import json
from pathlib import Path

from pseg.cli import main

TINY_CONFIG = """\
seed = 3
threads = 1

[synth]
count = 16
points = 160

[model]
tnet_widths = [8]
tnet_fc = 8
edgeconv_widths = [8, 8]
k_neighbors = 6
attn_dim = 8
head_widths = [16]

[pretrain]
steps = 3
batch = 2
points = 64
checkpoint_every = 2

[train]
iterations = 4
checkpoint_every = 2

[proto]
n_p = 3

[lpa]
k = 5

[eval]
episodes = 3
shots = [1, 2]
"""


def run_pipeline(root):
    """synth -> split -> pretrain -> train -> segment -> eval; returns the stage directories."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    cfg = root / "tiny.toml"
    cfg.write_text(TINY_CONFIG)
    d = {name: root / name for name in ("corpus", "split", "pretrain", "train", "segment", "eval", "reeval")}
    base = ["--config", str(cfg)]
    steps = [
        ["synth", *base, "--out", str(d["corpus"])],
        ["split", *base, "--paths.corpus", str(d["corpus"]), "--out", str(d["split"])],
        ["pretrain", *base, "--paths.corpus", str(d["corpus"]), "--paths.split", str(d["split"] / "split.json"),
         "--out", str(d["pretrain"])],
        ["train", *base, "--paths.corpus", str(d["corpus"]), "--paths.split", str(d["split"] / "split.json"),
         "--paths.checkpoint", str(d["pretrain"] / "pretrained.pseg"), "--out", str(d["train"])],
        ["segment", *base, "--paths.corpus", str(d["corpus"]), "--paths.split", str(d["split"] / "split.json"),
         "--paths.checkpoint", str(d["train"] / "final.pseg"), "--out", str(d["segment"])],
        ["eval", *base, "--paths.corpus", str(d["corpus"]), "--paths.split", str(d["split"] / "split.json"),
         "--paths.checkpoint", str(d["train"] / "final.pseg"), "--out", str(d["eval"])],
        ["eval", *base, "--paths.corpus", str(d["corpus"]), "--paths.predictions", str(d["segment"]),
         "--out", str(d["reeval"])],
    ]
    for argv in steps:
        rc = main(argv)
        if rc != 0:
            raise RuntimeError(f"pseg {argv[0]} exited with {rc}")
    return d


def files_under(root):
    root = Path(root)
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()
            and p.name != "tiny.toml"}


def report(path):
    return json.loads(Path(path).read_text())
