import json

import pytest

from pipeline import report, run_pipeline
from pseg import config
from pseg.cli import main
from pseg.plyio import load_corpus


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    return run_pipeline(tmp_path_factory.mktemp("cli"))


def test_pipeline_outputs(pipeline):
    d = pipeline
    assert (d["corpus"] / "manifest.json").exists() and (d["corpus"] / "specs.json").exists()
    assert len(load_corpus(d["corpus"])) == 16
    assert set(json.loads((d["split"] / "split.json").read_text())) >= {"train", "test", "clouds_per_class"}
    assert (d["pretrain"] / "pretrained.pseg").exists()
    log = (d["train"] / "train_log.csv").read_text().splitlines()
    assert log[0] == "iter,l_m,l_c,l_reg,total" and len(log) == 5
    assert {p.name for p in d["train"].glob("ckpt_*.pseg")} == {"ckpt_000002.pseg", "ckpt_000004.pseg"}
    assert len(list((d["segment"] / "predictions").glob("*.ply"))) == 3
    rep = report(d["eval"] / "report.json")
    assert [s["setting"] for s in rep["settings"]] == ["2-way 1-shot", "2-way 2-shot"]
    assert (d["eval"] / "table.txt").read_text().startswith("Method")
    assert not any(p.name.endswith(".partial") for p in d["eval"].parent.iterdir())


def test_effective_config_echo_reproduces(pipeline):
    echoed = config.load(pipeline["train"] / "config.toml")
    assert echoed["train.iterations"] == 4 and echoed["model.head_widths"] == [16]
    assert config.effective(echoed) == echoed


def test_segment_round_trip_through_ply(pipeline):
    summary = json.loads((pipeline["segment"] / "summary.json").read_text())
    rep = report(pipeline["reeval"] / "report.json")
    assert rep["settings"][0]["runs"] == [summary["miou"]]
    rows = (pipeline["segment"] / "episode_iou.csv").read_text().splitlines()
    assert rows[0] == "episode,class,iou" and sum(r.split(",")[1] == "mIoU" for r in rows) == 3


def test_zero_feature_synth(tmp_path, capsys):
    (tmp_path / "specs.json").write_text(json.dumps({"workpieces": [
        {"base_shape": "square_block", "length": 2, "width": 2, "height": 0.5, "features": [],
         "points_per_cloud": 100}]}))
    rc = main(["synth", "--paths.specs", str(tmp_path / "specs.json"), "--out", str(tmp_path / "c")])
    assert rc == 0
    corpus = load_corpus(tmp_path / "c")
    assert all((lc.labels == 0).all() for lc in corpus)


@pytest.mark.parametrize("argv,code", [
    (["train", "--out", "X"], "config_error"),
    (["synth", "--train.lambda", "-1", "--out", "X"], "config_error"),
    (["synth", "--no.such.key", "1", "--out", "X"], "config_error"),
    (["frobnicate"], "config_error"),
    (["split", "--paths.corpus", "MISSING", "--out", "X"], "format_error"),
    (["synth", "--synth.count", "2", "--synth.points", "10", "--out", "X"], "spec_error"),
])
def test_errors_are_single_lines_and_leave_no_output(tmp_path, capsys, argv, code):
    argv = [a.replace("X", str(tmp_path / "out")).replace("MISSING", str(tmp_path / "none")) for a in argv]
    assert main(argv) == 2
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith(code + ": ")
    assert not (tmp_path / "out").exists() and not (tmp_path / ".out.partial").exists()


def test_log_level_env(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("PSEG_LOG", "chatty")
    assert main(["synth", "--out", str(tmp_path / "o")]) == 2
    assert capsys.readouterr().err.startswith("config_error: ")


def test_gradcheck_command(capsys):
    assert main(["gradcheck"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[-1].startswith("max_error ") and float(out[-1].split()[1]) <= 1e-4


def test_gradcheck_failure_exit(capsys, monkeypatch):
    from pseg import gradsuite
    monkeypatch.setattr(gradsuite, "run_suite", lambda h, seed: [gradsuite.CaseResult("ops", "fake", 3e-3, 0.0)])
    assert main(["gradcheck"]) == 2
    assert capsys.readouterr().err.startswith("gradcheck_failed: ")
