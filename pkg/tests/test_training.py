import copy
import math

import numpy as np
import pytest
import torch

from coopsem.channel import sample_channel
from coopsem.data import ImageSet, build_pairs
from coopsem.errors import ConfigError, ConfigWarning, DependencyError
from coopsem.training import (STAGE_TRAINABLE, CoSCSystem, StagePlan, TrainLog, gate_accuracy, gate_targets,
                              load_checkpoint, module_checksums, save_checkpoint, stage1_train, stage2_train,
                              stage4_train, train_all)

from conftest import tiny_config
from helpers import stage3_gradcheck


@pytest.fixture(scope="module")
def trained(tiny_split):
    cfg = tiny_config()
    log = TrainLog()
    systems = train_all(cfg, tiny_split, seed=1, train_log=log)
    return cfg, systems, log


def test_all_stages_complete(trained):
    _, systems, _ = trained
    assert systems["cosc"].stages_done == [1, 2, 3, 4]
    assert systems["dls"].stages_done == [1, 2, 3]
    assert systems["cosc_nofusion"].stages_done == [1, 2, 3]
    assert systems["stage1"].stages_done == [1]
    assert systems["dls"].gate is None and systems["cosc_nofusion"].fusion is None


def _stage_runs(records):
    """Split a training log into contiguous per-stage runs."""
    runs, prev = [], None
    for rec in records:
        if prev is None or rec["stage"] != prev["stage"] or rec["epoch"] <= prev["epoch"]:
            runs.append([])
        runs[-1].append(rec)
        prev = rec
    return runs


def test_frozen_modules_keep_their_checksums(trained):
    _, _, log = trained
    runs = _stage_runs(log.records)
    # Co-SC stages 1-4, then DL-S stages 2-3, then no-fusion stage 3
    assert [r[0]["stage"] for r in runs] == [1, 2, 3, 4, 2, 3, 3]
    for run in runs:
        frozen = [n for n in run[0]["checksums"] if n not in STAGE_TRAINABLE[run[0]["stage"]]]
        for name in frozen:
            assert len({r["checksums"][name] for r in run}) == 1, (run[0]["stage"], name)
    # the gate is the only module stage 4 moves
    s4 = runs[3]
    assert s4[0]["checksums"]["gate"] != s4[-1]["checksums"]["gate"]


def test_shared_stage1_snapshot(trained):
    _, systems, _ = trained
    s1 = module_checksums(systems["stage1"])
    assert module_checksums(systems["dls"])["encoder"] != s1["encoder"]  # fine-tuned in stage 3
    # DL-S started from the same encoder: both stage-2 logs see identical encoder checksums
    _, _, log = trained
    stage2_encoders = {r["checksums"]["encoder"] for r in log.records if r["stage"] == 2}
    assert stage2_encoders == {s1["encoder"]}


def test_stage_plans():
    cfg = tiny_config()
    plan = StagePlan.for_stage(2, CoSCSystem(cfg, "cosc", 3), cfg.stages[2])
    assert plan.trainable == ("jsc_encoders", "decoder")
    assert set(plan.frozen) == {"encoder", "fusion", "identifier", "gate"}
    plan = StagePlan.for_stage(3, CoSCSystem(cfg, "dls", 3), cfg.stages[3])
    assert plan.trainable == ("encoder", "jsc_encoders", "decoder", "identifier")
    assert plan.loss == "identity-ce"


def test_out_of_order_stage_raises(tiny_split):
    cfg = tiny_config()
    system = CoSCSystem(cfg, "cosc", 3)
    with pytest.raises(DependencyError):
        stage2_train(system, tiny_split, cfg, 0)
    with pytest.raises(DependencyError):
        stage4_train(system, tiny_split, cfg, 0)


def test_stage1_needs_two_identities(tiny_split):
    cfg = tiny_config()
    one = copy.copy(tiny_split)
    mask = tiny_split.train.labels == tiny_split.train.labels[0]
    one.train = ImageSet(tiny_split.train.labels[mask], tiny_split.train.cams[mask],
                         tiny_split.train.images[mask], size=(16, 16))
    with pytest.raises(ConfigError):
        stage1_train(CoSCSystem(cfg, "cosc", 1), one, cfg, 0)


def test_unbalanced_gating_warns(trained, tiny_split):
    cfg, systems, _ = trained
    system = copy.deepcopy(systems["cosc"])
    system.stages_done = [1, 2, 3]
    with pytest.warns(ConfigWarning):
        stage4_train(system, tiny_split, cfg, 0, correlated_fraction=0.95)
    with pytest.raises(ConfigError):
        stage4_train(copy.deepcopy(systems["dls"]), tiny_split, cfg, 0)


def test_non_finite_loss_is_fatal(tiny_split):
    cfg = tiny_config()
    cfg.stages[1].lr = 1e300
    system = CoSCSystem(cfg, "cosc", 3)
    with torch.no_grad():
        system.identifier.fc.weight.fill_(float("inf"))
    with pytest.raises(FloatingPointError, match="stage 1"):
        stage1_train(system, tiny_split, cfg, 0)


def test_training_is_deterministic(trained, tiny_split):
    cfg, systems, _ = trained
    again = train_all(cfg, tiny_split, seed=1)
    for name in ("cosc", "dls", "cosc_nofusion"):
        assert module_checksums(again[name]) == module_checksums(systems[name])


def test_checkpoint_round_trip(tmp_path, trained):
    cfg, systems, _ = trained
    path = tmp_path / "stage4.pt"
    save_checkpoint(path, systems["cosc"], cfg)
    back = load_checkpoint(path, cfg)
    assert back.stages_done == [1, 2, 3, 4]
    assert module_checksums(back) == module_checksums(systems["cosc"])
    other = tiny_config(feature_dim=16)
    with pytest.raises(ConfigError) as err:
        load_checkpoint(path, other)
    assert err.value.field == "checkpoint"
    with pytest.raises(DependencyError):
        load_checkpoint(tmp_path / "nope.pt", cfg)


def test_checkpoints_written_per_stage(tmp_path, tiny_split):
    cfg = tiny_config()
    train_all(cfg, tiny_split, seed=2, checkpoint_dir=tmp_path)
    names = sorted(p.stem for p in tmp_path.glob("*.pt"))
    assert names == ["cosc_nofusion", "dls", "stage1", "stage2", "stage3", "stage4"]


def test_gate_targets_semantics():
    t = gate_targets(torch.tensor([True, False]))
    # column 1 is "same identity", column 0 "different"
    assert t.tolist() == [[0.0, 1.0], [1.0, 0.0]]


def test_gate_accuracy_runs(trained, tiny_split):
    cfg, systems, _ = trained
    acc = gate_accuracy(systems["cosc"], tiny_split, cfg, 40, seed=0)
    assert 0.0 <= acc <= 1.0
    assert gate_accuracy(systems["cosc"], tiny_split, cfg, 40, seed=0, snr_db=6.0) == \
        gate_accuracy(systems["cosc"], tiny_split, cfg, 40, seed=0, snr_db=6.0)


def test_transmit_recovers_features_at_high_snr_better(trained, tiny_split):
    cfg, systems, _ = trained
    system = systems["cosc"]
    feats = torch.randn(64, 2, cfg.feature_dim)
    gen = torch.Generator().manual_seed(0)
    H = sample_channel(2, 4, gen, batch_shape=(64,), dtype=torch.complex64).H
    unit = torch.complex(torch.randn(64, 4, cfg.n_symbols, generator=gen),
                         torch.randn(64, 4, cfg.n_symbols, generator=gen)) / math.sqrt(2)
    from coopsem.experiment import _transmit
    rec_low = _transmit(system, feats, H, unit, -20.0)
    rec_high = _transmit(system, feats, H, unit, 40.0)
    assert rec_low.shape == rec_high.shape == feats.shape
    assert not torch.equal(rec_low, rec_high)


def test_stage3_gradients_match_finite_differences():
    elementwise, _ = stage3_gradcheck(eps=1e-4)
    _, normwise = stage3_gradcheck(eps=1e-6)
    assert elementwise <= 1e-3
    assert normwise <= 1e-3


def test_pairs_for_training_are_balanced(tiny_split):
    rep = build_pairs(tiny_split.train, 400, 0.5, rng=0)
    assert abs(np.mean(rep.labels()) - 0.5) < 0.1
