import pytest

from se2mitosis.config import ConfigError, RunConfig, default_config_text, load_config, parse_config
from se2mitosis.model import ModelConfig
from se2mitosis.training import TrainConfig


def test_default_text_round_trips():
    assert parse_config(default_config_text()) == RunConfig()


def test_default_text_lists_reference_values():
    text = default_config_text()
    for line in ["batch_size = 64", "base_lr = 0.0003", "decay_factor = 0.8", "decay_every = 5000",
                 "weight_decay = 0.0002", "val_every = 1000", "mining_threshold = 0.5",
                 "widths = 16, 16, 16, 16, 32", "orientations = 8", "min_votes = 2", "nms_radius = 30.0"]:
        assert line in text, line


def test_overrides_parsed_with_types():
    cfg = parse_config("[model]\nwidths = 4 4 4 4 8\nhidden = 16\n"
                       "[train]\nbase_lr = 3e-3\ndecoupled_weight_decay = yes\nfirst_round_iters = 60\n"
                       "[augmentation]\nnoise_p = 0\ngamma_enabled = off\nnoise_reading = variance\n"
                       "[detection]\nmin_votes = 3\n")
    assert cfg.model == ModelConfig(widths=(4, 4, 4, 4, 8), hidden=16)
    assert cfg.train.base_lr == 3e-3 and cfg.train.decoupled_weight_decay is True
    assert cfg.train.first_round_iters == 60
    aug = cfg.train.augmentation
    assert aug.noise.p == 0 and not aug.gamma.enabled and aug.noise_reading == "variance"
    assert cfg.detection.min_votes == 3


def test_optional_int_blank_is_none():
    assert parse_config("[train]\nfirst_round_iters =\n").train.first_round_iters is None
    assert parse_config("[train]\nfirst_round_iters = none\n").train.first_round_iters is None


@pytest.mark.parametrize("text", [
    "[model]\nwidth = 3\n",
    "[train]\nfold = 2\n",
    "[bogus]\na = 1\n",
    "[train]\nbatch_size = many\n",
    "[train]\nbatch_size = 7\n",
    "[train]\ndecoupled_weight_decay = maybe\n",
    "[augmentation]\ngamma_p = 1.5\n",
    "[augmentation]\nwobble_p = 0.5\n",
    "[augmentation]\nnoise_reading = loud\n",
    "[model]\nkernel_size = 5\n",
    "not an ini file",
])
def test_bad_config_rejected(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_data_paths_resolved_relative_to_file(tmp_path):
    (tmp_path / "ann.json").write_text("{}")
    (tmp_path / "run.ini").write_text("[data]\nannotations = ann.json\nn_folds = 3\n")
    cfg = load_config(tmp_path / "run.ini")
    assert cfg.data.annotations == str((tmp_path / "ann.json").resolve())
    assert cfg.data.n_folds == 3


def test_missing_data_path_rejected(tmp_path):
    (tmp_path / "run.ini").write_text("[data]\nfolds = nowhere.json\n")
    with pytest.raises(ConfigError, match="nowhere.json"):
        load_config(tmp_path / "run.ini")


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.ini")


def test_desk_config_parses():
    from pathlib import Path

    cfg = load_config(Path(__file__).parents[1] / "configs" / "desk.ini")
    assert isinstance(cfg.train, TrainConfig) and cfg.train.mining_rounds == 1
