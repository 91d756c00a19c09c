import pytest

from coopsem.config import DATA_ROOT_ENV, ExperimentConfig, StageSettings, profile_defaults
from coopsem.errors import ConfigError


def test_toy_defaults():
    cfg = profile_defaults("toy").validate()
    assert (cfg.n_users, cfg.n_antennas, cfg.n_symbols, cfg.feature_dim) == (2, 4, 8, 64)
    assert cfg.snr_grid_db == [-6.0, -3.0, 0.0, 6.0, 12.0, 18.0]
    assert cfg.seeds == [1, 2, 3]
    assert sorted(cfg.stages) == [1, 2, 3, 4]
    assert cfg.stamp() == {"F": 64, "B": 8, "N": 2, "M": 4}


def test_full_profile_needs_dataset(monkeypatch, tmp_path):
    monkeypatch.delenv(DATA_ROOT_ENV, raising=False)
    cfg = profile_defaults("full")
    assert (cfg.n_symbols, cfg.feature_dim, cfg.backbone) == (16, 2048, "resnet50")
    with pytest.raises(ConfigError) as err:
        cfg.validate()
    assert err.value.field == "dataset_root"
    monkeypatch.setenv(DATA_ROOT_ENV, str(tmp_path))
    assert cfg.validate().resolved_dataset_root() == str(tmp_path)
    monkeypatch.setenv(DATA_ROOT_ENV, str(tmp_path / "nope"))
    with pytest.raises(ConfigError):
        cfg.validate()


def test_yaml_round_trip(tmp_path):
    cfg = profile_defaults("toy")
    cfg.snr_grid_db = [0.0, 5.0]
    cfg.stages[2] = StageSettings(3, 5e-4, 16, "cosine")
    cfg.toy.n_train_ids = 7
    path = tmp_path / "cfg.yaml"
    cfg.dump(path)
    back = ExperimentConfig.load(path)
    assert back.to_dict() == cfg.to_dict()
    assert back.stages[2] == StageSettings(3, 5e-4, 16, "cosine")


def test_partial_yaml_merges_with_profile(tmp_path):
    path = tmp_path / "cfg.yaml"
    path.write_text("seeds: [7]\nstages:\n  4: {epochs: 2, lr: 0.1, batch_size: 4}\n")
    cfg = ExperimentConfig.load(path).validate()
    assert cfg.seeds == [7]
    assert cfg.stages[4] == StageSettings(2, 0.1, 4)
    assert cfg.stages[1] == profile_defaults("toy").stages[1]


@pytest.mark.parametrize("field, value, path", [
    ("profile", "huge", "profile"),
    ("n_antennas", 1, "n_antennas"),
    ("n_symbols", 0, "n_symbols"),
    ("power", 0.0, "power"),
    ("snr_grid_db", [], "snr_grid_db"),
    ("seeds", [], "seeds"),
    ("train_snr_range_db", [5.0, -5.0], "train_snr_range_db"),
    ("eval_correlated_fraction", 1.5, "eval_correlated_fraction"),
    ("methods", ["cosc", "magic"], "methods"),
])
def test_validation_names_the_field(field, value, path):
    cfg = profile_defaults("toy")
    setattr(cfg, field, value)
    with pytest.raises(ConfigError) as err:
        cfg.validate()
    assert err.value.field == path
    assert str(err.value).startswith(path)


def test_stage_validation():
    cfg = profile_defaults("toy")
    cfg.stages[3] = StageSettings(2, 1e-3, 8, "linear")
    with pytest.raises(ConfigError) as err:
        cfg.validate()
    assert err.value.field == "stages.3.schedule"
    cfg.stages[3] = StageSettings(2, -1.0, 8)
    with pytest.raises(ConfigError) as err:
        cfg.validate()
    assert err.value.field == "stages.3"
    del cfg.stages[3]
    with pytest.raises(ConfigError):
        cfg.validate()


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError):
        ExperimentConfig.load(tmp_path / "missing.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError):
        ExperimentConfig.load(bad)
    bad.write_text("n_users: 2\nwarp_drive: true\n")
    with pytest.raises(ConfigError) as err:
        ExperimentConfig.load(bad)
    assert "warp_drive" in str(err.value)
    with pytest.raises(ConfigError):
        profile_defaults("medium")
