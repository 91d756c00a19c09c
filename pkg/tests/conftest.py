import numpy as np
import pytest
import torch

from coopsem.config import ExperimentConfig, StageSettings
from coopsem.data import ToyConfig, generate_toy_dataset

torch.set_num_threads(1)

CRITERIA_LINES = []


def pytest_terminal_summary(terminalreporter):
    if CRITERIA_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA_LINES):
            terminalreporter.write_line(line)


def tiny_config(tmp_path=None, **overrides) -> ExperimentConfig:
    """A model small enough to train all four stages in a few seconds."""
    stages = {k: StageSettings(1, 1e-3, 8) for k in (1, 2, 3, 4)}
    cfg = ExperimentConfig(
        n_symbols=4, feature_dim=8, n_identities=3,
        toy=ToyConfig(n_train_ids=3, n_test_ids=3, train_per_cam=4, query_per_cam=2, gallery_per_cam=2, size=16),
        stages=stages, train_pairs_per_epoch=16, eval_pairs=6, mse_channel_draws=2,
        snr_grid_db=[-3.0, 18.0], seeds=[1],
        out_dir=str(tmp_path / "run") if tmp_path is not None else "runs/tiny",
    )
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg.validate()


@pytest.fixture
def tiny_cfg(tmp_path):
    return tiny_config(tmp_path)


@pytest.fixture(scope="session")
def tiny_split():
    return generate_toy_dataset(tiny_config().toy, rng=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
