"""Four-stage training with module freezing, plus the DL-S and no-fusion ablations.

Stage 1 trains the semantic encoder with the identity classifier. Stage 2 trains
the JSC encoders and decoder(s) on feature MSE through the channel. Stage 3 fine
tunes the whole backbone on identity cross-entropy. Stage 4 trains the gate alone.
"""

from __future__ import annotations

import copy
import hashlib
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F_

from .channel import (ChannelRealization, apply_channel, mmse_detect, normalize_power, sample_channel,
                      snr_to_noise_variance)
from .codec import CoopJSCDecoder, JSCEncoder, SeparateJSCDecoder, build_semantic_encoder
from .config import ExperimentConfig, StageSettings
from .data import DatasetSplit, ImageSet, build_pairs
from .errors import ConfigError, ConfigWarning, DependencyError
from .task import FusionModule, GatingModule, Identifier

log = logging.getLogger(__name__)

MODULE_NAMES = ("encoder", "jsc_encoders", "decoder", "fusion", "identifier", "gate")
VARIANTS = ("cosc", "cosc_nofusion", "dls")
STAGE_TRAINABLE = {
    1: ("encoder", "identifier"),
    2: ("jsc_encoders", "decoder"),
    3: ("encoder", "jsc_encoders", "decoder", "fusion", "identifier"),
    4: ("gate",),
}


class CoSCSystem(nn.Module):
    """All learned modules of one method variant.

    ``cosc`` has the cooperative decoder, fusion and gate; ``cosc_nofusion``
    keeps the cooperative decoder only; ``dls`` uses one separate decoder per user.
    """

    def __init__(self, cfg: ExperimentConfig, variant: str = "cosc", n_identities: int | None = None):
        super().__init__()
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}", "variant")
        self.variant = variant
        self.n_users = cfg.n_users
        self.n_antennas = cfg.n_antennas
        self.n_symbols = cfg.n_symbols
        self.feature_dim = cfg.feature_dim
        self.power = cfg.power
        self.stamp = cfg.stamp()
        F, B, N = cfg.feature_dim, cfg.n_symbols, cfg.n_users
        self.encoder = build_semantic_encoder(cfg.backbone, F)
        self.jsc_encoders = nn.ModuleList([JSCEncoder(F, B, cfg.power) for _ in range(N)])
        if variant == "dls":
            self.decoder = nn.ModuleList([SeparateJSCDecoder(B, F) for _ in range(N)])
        else:
            self.decoder = CoopJSCDecoder(N, B, F)
        self.fusion = FusionModule(N, F) if variant == "cosc" else None
        self.identifier = Identifier(F, n_identities or cfg.n_identities)
        self.gate = GatingModule(F) if variant == "cosc" else None
        self.stages_done: list[int] = []

    def present(self) -> list[str]:
        return [n for n in MODULE_NAMES if getattr(self, n) is not None]

    def encode_symbols(self, feats: torch.Tensor) -> torch.Tensor:
        """(b, N, F) features -> power-normalized symbols (b, N, 2B)."""
        return torch.stack([enc(feats[:, i]) for i, enc in enumerate(self.jsc_encoders)], dim=1)

    def decode(self, x_hat: torch.Tensor) -> torch.Tensor:
        """(b, N, 2B) detected symbols -> recovered features (b, N, F)."""
        if self.variant == "dls":
            return torch.stack([dec(x_hat[:, i]) for i, dec in enumerate(self.decoder)], dim=1)
        return self.decoder.split(self.decoder(x_hat))

    def transmit(self, feats: torch.Tensor, chan: ChannelRealization, gen=None,
                 noise: torch.Tensor | None = None) -> torch.Tensor:
        X = self.encode_symbols(feats)
        Y = apply_channel(X, chan, gen, noise=noise)
        x_hat = mmse_detect(Y, chan, self.power).to(feats.dtype)
        # receiver gain control: MMSE shrinks its output by an SNR-dependent
        # factor the decoder cannot see, so each block is rescaled to power P
        return self.decode(normalize_power(x_hat, self.power))

    def random_channel(self, batch: int, snr_db, gen: torch.Generator, dtype=torch.float32):
        """Fresh fading per sample; ``snr_db`` is a scalar or one value per sample."""
        cdtype = torch.complex128 if dtype == torch.float64 else torch.complex64
        if not np.isscalar(snr_db):
            snr_db = torch.as_tensor(np.asarray(snr_db), dtype=torch.float64)
        nv = snr_to_noise_variance(snr_db, self.power)
        if torch.is_tensor(nv):
            nv = nv.to(dtype)
        return sample_channel(self.n_users, self.n_antennas, gen, nv, batch_shape=(batch,), dtype=cdtype)


# --- bookkeeping -----------------------------------------------------------------

@dataclass
class StagePlan:
    stage: int
    trainable: tuple
    frozen: tuple
    settings: StageSettings
    loss: str

    @classmethod
    def for_stage(cls, stage: int, system: CoSCSystem, settings: StageSettings) -> "StagePlan":
        present = system.present()
        trainable = tuple(n for n in STAGE_TRAINABLE[stage] if n in present)
        frozen = tuple(n for n in present if n not in trainable)
        loss = {1: "identity-ce", 2: "feature-mse", 3: "identity-ce", 4: "gate-bce"}[stage]
        return cls(stage, trainable, frozen, settings, loss)


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    def add(self, **rec):
        self.records.append(rec)
        log.info("%s", rec)


def module_checksums(system: CoSCSystem) -> dict:
    out = {}
    for name in system.present():
        h = hashlib.sha256()
        for key, t in getattr(system, name).state_dict().items():
            h.update(key.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
        out[name] = h.hexdigest()[:16]
    return out


def _configure(system: CoSCSystem, plan: StagePlan):
    for name in system.present():
        mod = getattr(system, name)
        on = name in plan.trainable
        mod.train(on)
        for p in mod.parameters():
            p.requires_grad_(on)


def _params(system, plan):
    return [p for n in plan.trainable for p in getattr(system, n).parameters()]


def _check_finite(loss, stage, epoch, step):
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {loss.item()} at stage {stage}, epoch {epoch}, step {step}")


def _require(system: CoSCSystem, stage: int):
    needed = list(range(1, stage))
    if system.stages_done[:stage - 1] != needed:
        raise DependencyError(f"stage {stage} needs stages {needed} completed, have {system.stages_done}")


def _run_stage(system, plan, step_fn, batches_fn, train_log, val_fn=None):
    _require(system, plan.stage)
    _configure(system, plan)
    opt = torch.optim.Adam(_params(system, plan), lr=plan.settings.lr)
    sched = None
    if plan.settings.schedule == "cosine":
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(plan.settings.epochs, 1))
    before = module_checksums(system)
    if val_fn is not None:
        train_log.add(stage=plan.stage, epoch=0, loss=float("nan"), val=val_fn(), checksums=before)
    for epoch in range(1, plan.settings.epochs + 1):
        total, count = 0.0, 0
        for step, batch in enumerate(batches_fn(epoch)):
            loss = step_fn(batch)
            _check_finite(loss, plan.stage, epoch, step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item()
            count += 1
        if sched is not None:
            sched.step()
        sums = module_checksums(system)
        changed = [n for n in plan.frozen if sums[n] != before[n]]
        if changed:
            raise RuntimeError(f"frozen modules changed during stage {plan.stage}: {changed}")
        val = val_fn() if val_fn is not None else None
        _configure(system, plan)
        train_log.add(stage=plan.stage, epoch=epoch, loss=total / max(count, 1), val=val, checksums=sums)
    system.eval()
    system.stages_done.append(plan.stage)
    return train_log


def _to_tensor(split: DatasetSplit, images: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(split.normalize(images).astype(np.float32))


def _labels(split: DatasetSplit, raw) -> torch.Tensor:
    mapping = split.label_map()
    return torch.tensor([mapping[int(v)] for v in raw], dtype=torch.long)


def encode_features(encoder, split: DatasetSplit, images: ImageSet, batch: int = 256) -> torch.Tensor:
    """Clean features of every image in ``images`` (encoder in inference mode)."""
    was = encoder.training
    encoder.eval()
    out = []
    with torch.no_grad():
        for s in range(0, len(images), batch):
            out.append(encoder(_to_tensor(split, images.array(range(s, min(s + batch, len(images)))))))
    encoder.train(was)
    return torch.cat(out)


def _pair_arrays(report):
    idx = np.array([s.indices for s in report.samples])
    ids = np.array([s.identities for s in report.samples])
    corr = np.array([s.correlated for s in report.samples])
    return idx, ids, corr


def _uniform_snr(rng, cfg, n: int):
    # one SNR per sample: a single SNR per batch lets batch norm absorb the
    # SNR-dependent detector scaling, which running statistics cannot at inference
    lo, hi = cfg.train_snr_range_db
    return rng.uniform(lo, hi, n)


# --- stages --------------------------------------------------------------------------

def stage1_train(system: CoSCSystem, split: DatasetSplit, cfg: ExperimentConfig, seed: int,
                 train_log: TrainLog | None = None) -> TrainLog:
    if split.n_train_identities < 2:
        raise ConfigError("stage 1 needs at least two training identities", "dataset.train")
    train_log = train_log or TrainLog()
    plan = StagePlan.for_stage(1, system, cfg.stages[1])
    rng = np.random.default_rng([seed, 1])
    x_all = split.train
    y_all = _labels(split, x_all.labels)
    bs = plan.settings.batch_size

    def batches(epoch):
        perm = rng.permutation(len(x_all))
        for s in range(0, len(perm), bs):
            idx = perm[s:s + bs]
            if len(idx) > 1:
                yield _to_tensor(split, x_all.array(idx)), y_all[idx]

    def step(batch):
        x, y = batch
        return F_.cross_entropy(system.identifier(system.encoder(x)), y)

    def val():
        with torch.no_grad():
            feats = encode_features(system.encoder, split, x_all)
            pred = system.identifier(feats).argmax(-1)
        return float((pred == y_all).float().mean())

    return _run_stage(system, plan, step, batches, train_log, val)


def feature_mse_at(system: CoSCSystem, feats: torch.Tensor, pair_idx: np.ndarray, snr_db: float,
                   gen_seed: int) -> float:
    """Feature MSE of the recovered concatenated features on fixed pairs and channel draws."""
    gen = torch.Generator().manual_seed(gen_seed)
    was = system.training
    system.eval()
    with torch.no_grad():
        g = feats[torch.from_numpy(pair_idx)]
        chan = system.random_channel(len(g), snr_db, gen, g.dtype)
        rec = system.transmit(g, chan, gen)
        mse = F_.mse_loss(rec, g).item()
    system.train(was)
    return mse


def stage2_train(system: CoSCSystem, split: DatasetSplit, cfg: ExperimentConfig, seed: int,
                 train_log: TrainLog | None = None) -> TrainLog:
    train_log = train_log or TrainLog()
    _require(system, 2)
    plan = StagePlan.for_stage(2, system, cfg.stages[2])
    rng = np.random.default_rng([seed, 2])
    gen = torch.Generator().manual_seed(seed * 7919 + 2)
    feats = encode_features(system.encoder, split, split.train)
    val_feats = encode_features(system.encoder, split, split.query)
    val_pairs, _, _ = _pair_arrays(build_pairs(split.query, 200, cfg.train_correlated_fraction, [seed, 20]))
    bs = plan.settings.batch_size

    def batches(epoch):
        idx, _, _ = _pair_arrays(build_pairs(split.train, cfg.train_pairs_per_epoch,
                                             cfg.train_correlated_fraction, rng))
        for s in range(0, len(idx), bs):
            chunk = idx[s:s + bs]
            if len(chunk) > 1:
                yield feats[torch.from_numpy(chunk)], _uniform_snr(rng, cfg, len(chunk))

    def step(batch):
        g, snr = batch
        chan = system.random_channel(len(g), snr, gen)
        rec = system.transmit(g, chan, gen)
        return F_.mse_loss(rec.flatten(1), g.flatten(1))

    def val():
        return feature_mse_at(system, val_feats, val_pairs, 0.0, seed * 31 + 5)

    return _run_stage(system, plan, step, batches, train_log, val)


def stage3_loss(system: CoSCSystem, images: torch.Tensor, labels: torch.Tensor, correlated: torch.Tensor,
                chan: ChannelRealization, gen=None, noise=None, mse_weight: float = 0.0) -> torch.Tensor:
    """Identity cross-entropy on every recovered feature and, for correlated samples, on the fused one."""
    b, n = images.shape[:2]
    g = system.encoder(images.flatten(0, 1)).unflatten(0, (b, n))
    rec = system.transmit(g, chan, gen, noise=noise)
    loss = F_.cross_entropy(system.identifier(rec.flatten(0, 1)), labels.flatten(), reduction="sum") / b
    if system.fusion is not None and bool(correlated.any()):
        fused = system.fusion(rec[correlated])
        loss = loss + F_.cross_entropy(system.identifier(fused), labels[correlated, 0], reduction="sum") / b
    if mse_weight:
        loss = loss + mse_weight * F_.mse_loss(rec, g.detach())
    return loss


def stage3_train(system: CoSCSystem, split: DatasetSplit, cfg: ExperimentConfig, seed: int,
                 train_log: TrainLog | None = None) -> TrainLog:
    train_log = train_log or TrainLog()
    plan = StagePlan.for_stage(3, system, cfg.stages[3])
    rng = np.random.default_rng([seed, 3])
    gen = torch.Generator().manual_seed(seed * 7919 + 3)
    mapping = split.label_map()
    bs = plan.settings.batch_size

    def batches(epoch):
        idx, ids, corr = _pair_arrays(build_pairs(split.train, cfg.train_pairs_per_epoch,
                                                  cfg.train_correlated_fraction, rng))
        for s in range(0, len(idx), bs):
            sl = slice(s, s + bs)
            if len(idx[sl]) < 2:
                continue
            imgs = _to_tensor(split, split.train.array(idx[sl].ravel()))
            imgs = imgs.unflatten(0, idx[sl].shape)
            labels = torch.tensor([[mapping[int(v)] for v in row] for row in ids[sl]])
            yield imgs, labels, torch.from_numpy(corr[sl]), _uniform_snr(rng, cfg, len(imgs))

    def step(batch):
        imgs, labels, corr, snr = batch
        chan = system.random_channel(len(imgs), snr, gen)
        return stage3_loss(system, imgs, labels, corr, chan, gen, mse_weight=cfg.stage3_mse_weight)

    return _run_stage(system, plan, step, batches, train_log)


def gate_targets(correlated: torch.Tensor) -> torch.Tensor:
    """Two-column targets: column 1 is 1 for same-identity pairs, column 0 its complement."""
    phi = correlated.float()
    return torch.stack([1 - phi, phi], dim=-1)


def recovered_pairs(system: CoSCSystem, feats: torch.Tensor, idx: np.ndarray, snr_db, gen) -> torch.Tensor:
    with torch.no_grad():
        g = feats[torch.from_numpy(idx)]
        return system.transmit(g, system.random_channel(len(g), snr_db, gen), gen)


def gate_accuracy(system: CoSCSystem, split: DatasetSplit, cfg: ExperimentConfig, n_pairs: int, seed: int,
                  snr_db: float | None = None) -> float:
    """Held-out gating accuracy on balanced test-identity pairs.

    Without ``snr_db`` each pair sees an SNR drawn from the training range.
    """
    rng = np.random.default_rng([seed, 40])
    gen = torch.Generator().manual_seed(seed * 7919 + 40)
    feats = encode_features(system.encoder, split, split.query)
    idx, _, corr = _pair_arrays(build_pairs(split.query, n_pairs, 0.5, rng))
    lo, hi = cfg.train_snr_range_db
    if snr_db is None:
        snr = torch.from_numpy(rng.uniform(lo, hi, len(idx)))
    else:
        snr = torch.full((len(idx),), float(snr_db), dtype=torch.float64)
    system.eval()
    with torch.no_grad():
        g = feats[torch.from_numpy(idx)]
        nv = snr_to_noise_variance(snr, system.power).float()
        chan = sample_channel(system.n_users, system.n_antennas, gen, nv, batch_shape=(len(g),),
                              dtype=torch.complex64)
        rec = system.transmit(g, chan, gen)
        same = system.gate(rec[:, 0], rec[:, 1])[:, 1] > cfg.gate_threshold
    return float((same.numpy() == corr).mean())


def stage4_train(system: CoSCSystem, split: DatasetSplit, cfg: ExperimentConfig, seed: int,
                 train_log: TrainLog | None = None, correlated_fraction: float = 0.5) -> TrainLog:
    if system.gate is None:
        raise ConfigError(f"variant {system.variant!r} has no gating module", "variant")
    if min(correlated_fraction, 1 - correlated_fraction) < 0.1:
        warnings.warn("gating pairs are unbalanced (a class below 10%)", ConfigWarning, stacklevel=2)
    train_log = train_log or TrainLog()
    _require(system, 4)
    plan = StagePlan.for_stage(4, system, cfg.stages[4])
    rng = np.random.default_rng([seed, 4])
    gen = torch.Generator().manual_seed(seed * 7919 + 4)
    feats = encode_features(system.encoder, split, split.train)
    bs = plan.settings.batch_size

    def batches(epoch):
        idx, _, corr = _pair_arrays(build_pairs(split.train, cfg.train_pairs_per_epoch, correlated_fraction, rng))
        for s in range(0, len(idx), bs):
            if len(idx[s:s + bs]) > 1:
                rec = recovered_pairs(system, feats, idx[s:s + bs], _uniform_snr(rng, cfg, len(idx[s:s + bs])), gen)
                yield rec, torch.from_numpy(corr[s:s + bs])

    def step(batch):
        rec, corr = batch
        scores = system.gate(rec[:, 0], rec[:, 1])
        return F_.binary_cross_entropy(scores, gate_targets(corr))

    def val():
        return gate_accuracy(system, split, cfg, 400, seed)

    return _run_stage(system, plan, step, batches, train_log, val)


# --- orchestration -------------------------------------------------------------------

def copy_modules(dst: CoSCSystem, src: CoSCSystem, names, stages_done):
    for n in names:
        getattr(dst, n).load_state_dict(getattr(src, n).state_dict())
    dst.stages_done = list(stages_done)


def train_ablations(stage1: CoSCSystem, split: DatasetSplit, cfg: ExperimentConfig, seed: int,
                    train_log: TrainLog | None = None, stage2: CoSCSystem | None = None) -> dict:
    """Train DL-S from the shared stage-1 snapshot and, given the Co-SC stage-2
    snapshot, Co-SC w/o fusion (whose stage 2 is identical to Co-SC's)."""
    if 1 not in stage1.stages_done:
        raise DependencyError("ablations need the stage-1 checkpoint")
    train_log = train_log or TrainLog()
    n_ids = stage1.identifier.fc.out_features
    out = {}
    torch.manual_seed(seed * 100 + 11)
    dls = CoSCSystem(cfg, "dls", n_ids)
    copy_modules(dls, stage1, ("encoder", "identifier"), [1])
    stage2_train(dls, split, cfg, seed, train_log)
    stage3_train(dls, split, cfg, seed, train_log)
    out["dls"] = dls
    if stage2 is not None:
        if stage2.stages_done != [1, 2]:
            raise DependencyError("no-fusion ablation needs the Co-SC stage-2 snapshot")
        nof = CoSCSystem(cfg, "cosc_nofusion", n_ids)
        copy_modules(nof, stage2, ("encoder", "jsc_encoders", "decoder", "identifier"), [1, 2])
        stage3_train(nof, split, cfg, seed, train_log)
        out["cosc_nofusion"] = nof
    return out


def train_all(cfg: ExperimentConfig, split: DatasetSplit, seed: int, train_log: TrainLog | None = None,
              checkpoint_dir=None) -> dict:
    """Train Co-SC through all four stages plus both ablations.

    Returns systems keyed by variant, plus ``stage1`` (the server-side encoder
    used by the classical baselines).
    """
    train_log = train_log or TrainLog()
    torch.manual_seed(seed)
    cosc = CoSCSystem(cfg, "cosc", split.n_train_identities)
    stage1_train(cosc, split, cfg, seed, train_log)
    snap1 = copy.deepcopy(cosc)
    _save(checkpoint_dir, "stage1", cosc, cfg)
    stage2_train(cosc, split, cfg, seed, train_log)
    snap2 = copy.deepcopy(cosc)
    _save(checkpoint_dir, "stage2", cosc, cfg)
    stage3_train(cosc, split, cfg, seed, train_log)
    _save(checkpoint_dir, "stage3", cosc, cfg)
    stage4_train(cosc, split, cfg, seed, train_log)
    _save(checkpoint_dir, "stage4", cosc, cfg)
    systems = {"cosc": cosc}
    systems.update(train_ablations(snap1, split, cfg, seed, train_log, stage2=snap2))
    for name in ("dls", "cosc_nofusion"):
        _save(checkpoint_dir, name, systems[name], cfg)
    systems["stage1"] = snap1
    return systems


# --- checkpoints ---------------------------------------------------------------------

def _save(directory, name, system, cfg):
    if directory is not None:
        save_checkpoint(Path(directory) / f"{name}.pt", system, cfg)


def save_checkpoint(path, system: CoSCSystem, cfg: ExperimentConfig):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "stamp": cfg.stamp(),
        "variant": system.variant,
        "n_identities": system.identifier.fc.out_features,
        "stages_done": list(system.stages_done),
        "state": {n: getattr(system, n).state_dict() for n in system.present()},
    }, path)


def load_checkpoint(path, cfg: ExperimentConfig) -> CoSCSystem:
    path = Path(path)
    if not path.is_file():
        raise DependencyError(f"checkpoint {path} not found")
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if blob["stamp"] != cfg.stamp():
        raise ConfigError(f"checkpoint stamp {blob['stamp']} does not match config {cfg.stamp()}", "checkpoint")
    system = CoSCSystem(cfg, blob["variant"], blob["n_identities"])
    for name, state in blob["state"].items():
        getattr(system, name).load_state_dict(state)
    system.stages_done = list(blob["stages_done"])
    system.eval()
    return system
