import pytest

from pseg import config
from pseg.errors import ConfigError


def test_defaults_validate_and_round_trip(tmp_path):
    cfg = config.effective()
    config.dump(cfg, tmp_path / "c.toml")
    assert config.load(tmp_path / "c.toml") == cfg


def test_overrides_and_types(tmp_path):
    (tmp_path / "c.toml").write_text('seed = 4\n[train]\nlambda = 0.0\niterations = 7\n[lpa]\nsigma = 0.5\n')
    cfg = config.effective(config.load(tmp_path / "c.toml"), {"train.iterations": 9})
    assert cfg["seed"] == 4 and cfg["train.lambda"] == 0.0 and cfg["train.iterations"] == 9
    assert config.lpa_config(cfg).sigma == 0.5 and config.train_config(cfg).lam == 0.0
    assert config.parse_flag_value("model.head_widths", "32,16") == [32, 16]
    assert config.parse_flag_value("train.unfreeze_attention", "true") is True
    assert config.parse_flag_value("lpa.sigma", "adaptive") == "adaptive"


@pytest.mark.parametrize("text", [
    "bogus = 1\n",
    "[train]\nlambda = -1.0\n",
    "[train]\niterations = 'many'\n",
    "[split]\nfold = 3\n",
    "[lpa]\nalpha = 1.0\n",
    "[lpa]\nsigma = 'wide'\n",
    "seed = \n",
])
def test_bad_files_rejected(text):
    with pytest.raises(ConfigError):
        config.effective(config.loads(text))


def test_bad_flags_rejected():
    with pytest.raises(ConfigError):
        config.parse_flag_value("train.nope", "1")
    with pytest.raises(ConfigError):
        config.parse_flag_value("train.iterations", "x")
    with pytest.raises(ConfigError):
        config.parse_flag_value("train.unfreeze_attention", "maybe")
