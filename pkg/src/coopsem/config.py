"""Experiment configuration: dataclasses with YAML round-tripping and validation."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .data import ToyConfig
from .errors import ConfigError

DATA_ROOT_ENV = "COOPSEM_DATA_ROOT"
METHODS = ("cosc", "cosc_nofusion", "dls", "digital", "softcast")
LEARNED_METHODS = ("cosc", "cosc_nofusion", "dls")


SCHEDULES = ("constant", "cosine")


@dataclass
class StageSettings:
    epochs: int
    lr: float
    batch_size: int
    schedule: str = "constant"   # "cosine" anneals lr to zero over the stage


@dataclass
class ExperimentConfig:
    profile: str = "toy"
    n_users: int = 2
    n_antennas: int = 4
    n_symbols: int = 8
    feature_dim: int = 64
    power: float = 1.0
    n_identities: int = 20
    backbone: str = "toy"
    snr_grid_db: list = field(default_factory=lambda: [-6.0, -3.0, 0.0, 6.0, 12.0, 18.0])
    train_snr_range_db: list = field(default_factory=lambda: [-6.0, 18.0])
    seeds: list = field(default_factory=lambda: [1, 2, 3])
    dataset_root: str | None = None
    toy: ToyConfig = field(default_factory=ToyConfig)
    stages: dict = field(default_factory=dict)
    train_pairs_per_epoch: int = 600
    train_correlated_fraction: float = 0.5
    eval_pairs: int = 300
    eval_correlated_fraction: float = 0.5
    mse_channel_draws: int = 20
    stage3_mse_weight: float = 1.0
    gate_threshold: float = 0.5
    multi_user_gating: bool = True
    jpeg_quality: int = 90
    softcast_chunk: int = 8
    ldpc_max_iter: int = 50
    methods: list = field(default_factory=lambda: list(METHODS))
    out_dir: str = "runs/toy"

    def __post_init__(self):
        if isinstance(self.toy, dict):
            self.toy = ToyConfig(**self.toy)
        self.stages = {int(k): (StageSettings(**v) if isinstance(v, dict) else v)
                       for k, v in (self.stages or default_stages(self.profile)).items()}

    def stamp(self) -> dict:
        return {"F": self.feature_dim, "B": self.n_symbols, "N": self.n_users, "M": self.n_antennas}

    def validate(self) -> "ExperimentConfig":
        if self.profile not in ("toy", "full"):
            raise ConfigError("must be 'toy' or 'full'", "profile")
        for name in ("n_users", "n_antennas", "n_symbols", "feature_dim", "n_identities"):
            if getattr(self, name) < 1:
                raise ConfigError("must be >= 1", name)
        if self.n_antennas < self.n_users:
            raise ConfigError("need at least as many antennas as users", "n_antennas")
        if self.power <= 0:
            raise ConfigError("must be positive", "power")
        if not self.snr_grid_db:
            raise ConfigError("must not be empty", "snr_grid_db")
        if not self.seeds:
            raise ConfigError("must not be empty", "seeds")
        lo, hi = self.train_snr_range_db
        if lo > hi:
            raise ConfigError("lower bound exceeds upper bound", "train_snr_range_db")
        for frac in ("train_correlated_fraction", "eval_correlated_fraction"):
            if not 0 <= getattr(self, frac) <= 1:
                raise ConfigError("must lie in [0, 1]", frac)
        if sorted(self.stages) != [1, 2, 3, 4]:
            raise ConfigError("plans for stages 1-4 required", "stages")
        for k, s in self.stages.items():
            if s.epochs < 0 or s.lr <= 0 or s.batch_size < 1:
                raise ConfigError("epochs >= 0, lr > 0, batch_size >= 1 required", f"stages.{k}")
            if s.schedule not in SCHEDULES:
                raise ConfigError(f"must be one of {SCHEDULES}", f"stages.{k}.schedule")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown methods {bad}", "methods")
        if self.backbone == "resnet50" and self.feature_dim != 2048:
            raise ConfigError("ResNet-50 features are 2048-dim", "feature_dim")
        if self.profile == "full" and not self.resolved_dataset_root():
            raise ConfigError("full profile needs a dataset root", "dataset_root")
        root = self.resolved_dataset_root()
        if root and not Path(root).is_dir():
            raise ConfigError(f"{root} does not exist", "dataset_root")
        return self

    def resolved_dataset_root(self) -> str | None:
        return os.environ.get(DATA_ROOT_ENV) or self.dataset_root

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = {int(k): asdict(v) for k, v in self.stages.items()}
        return d

    def dump(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown keys {sorted(unknown)}", "config")
        base = profile_defaults(d.get("profile", "toy"))
        merged = {**base.to_dict(), **d}
        if "stages" in d and d["stages"]:
            merged["stages"] = {**base.to_dict()["stages"], **{int(k): v for k, v in d["stages"].items()}}
        try:
            return cls(**merged)
        except TypeError as exc:
            raise ConfigError(str(exc), "config") from exc

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"{p} not found", "config")
        d = yaml.safe_load(p.read_text()) or {}
        if not isinstance(d, dict):
            raise ConfigError("top level must be a mapping", "config")
        return cls.from_dict(d)


def default_stages(profile: str) -> dict:
    if profile == "full":
        return {1: StageSettings(60, 1e-4, 64), 2: StageSettings(40, 1e-3, 64),
                3: StageSettings(20, 1e-4, 64), 4: StageSettings(10, 1e-3, 64)}
    return {1: StageSettings(20, 1e-3, 32), 2: StageSettings(600, 3e-3, 32, "cosine"),
            3: StageSettings(15, 1e-4, 32), 4: StageSettings(60, 1e-2, 32, "cosine")}


def profile_defaults(profile: str) -> ExperimentConfig:
    if profile == "full":
        return ExperimentConfig(profile="full", n_symbols=16, feature_dim=2048, n_identities=576,
                                backbone="resnet50", eval_pairs=1000, out_dir="runs/full",
                                stages=default_stages("full"))
    if profile == "toy":
        return ExperimentConfig(stages=default_stages("toy"))
    raise ConfigError(f"unknown profile {profile!r}", "profile")
