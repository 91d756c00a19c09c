"""SNR sweeps over learned and classical methods, producing MetricsReport rows.

Every method and SNR point of one seed sees the same fading matrices and the
same unit-variance noise draws (scaled per SNR), so differences between cells
reflect the methods rather than Monte Carlo noise.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch

from .baselines.digital import ChannelConfig, default_code, digital_transmit
from .baselines.softcast import softcast_transmit
from .channel import ChannelRealization, sample_channel, snr_to_noise_variance
from .config import LEARNED_METHODS, ExperimentConfig
from .data import DatasetSplit, build_pairs
from .task import (RankedList, RetrievalIndex, cooperative_queries, failed_query, mean_average_precision,
                   rank_n_accuracy, retrieve)
from .training import CoSCSystem, _to_tensor, encode_features

log = logging.getLogger(__name__)

REPORT_FIELDS = ("method", "snr_db", "seed", "rank1", "rank5", "mAP", "feature_mse", "symbol_count",
                 "decode_failure_rate", "n_queries")


@dataclass
class EvalDraws:
    """Shared channel randomness for one seed."""

    H: torch.Tensor          # (P, M, N) one fading matrix per pair
    noise: torch.Tensor      # (P, M, B) CN(0, 1)
    H_mse: torch.Tensor      # (K*P, M, N) extra draws for the feature-MSE estimate
    noise_mse: torch.Tensor


def _cn(shape, gen):
    re = torch.randn(shape, generator=gen, dtype=torch.float64)
    im = torch.randn(shape, generator=gen, dtype=torch.float64)
    return torch.complex(re, im) / math.sqrt(2.0)


def make_draws(cfg: ExperimentConfig, n_pairs: int, seed: int) -> EvalDraws:
    gen = torch.Generator().manual_seed(10_007 * seed + 1)
    M, N, B, K = cfg.n_antennas, cfg.n_users, cfg.n_symbols, cfg.mse_channel_draws
    H = sample_channel(N, M, gen, batch_shape=(n_pairs,)).H
    noise = _cn((n_pairs, M, B), gen)
    H_mse = sample_channel(N, M, gen, batch_shape=(K * n_pairs,)).H
    noise_mse = _cn((K * n_pairs, M, B), gen)
    return EvalDraws(H, noise, H_mse, noise_mse)


def eval_pairs(cfg: ExperimentConfig, split: DatasetSplit, seed: int):
    rep = build_pairs(split.query, cfg.eval_pairs, cfg.eval_correlated_fraction, rng=[seed, 99],
                      n_users=cfg.n_users)
    return rep.samples


def gallery_index(encoder, split: DatasetSplit) -> RetrievalIndex:
    feats = encode_features(encoder, split, split.gallery).double().numpy()
    return RetrievalIndex(feats, split.gallery.labels, split.gallery.cams)


def _metrics(lists) -> dict:
    return {
        "rank1": rank_n_accuracy(lists, 1),
        "rank5": rank_n_accuracy(lists, 5),
        "mAP": mean_average_precision(lists),
        "n_queries": len(lists),
    }


def _transmit(system: CoSCSystem, g: torch.Tensor, H: torch.Tensor, unit_noise: torch.Tensor, snr_db: float):
    nv = snr_to_noise_variance(snr_db, system.power)
    chan = ChannelRealization(H.to(torch.complex64), nv)
    with torch.no_grad():
        return system.transmit(g, chan, noise=(math.sqrt(nv) * unit_noise).to(torch.complex64))


def learned_recovery(system: CoSCSystem, split: DatasetSplit, samples, draws: EvalDraws, snr_db: float):
    """Clean and recovered query features (P, N, F) plus the feature MSE from the extra draws."""
    system.eval()
    qfeats = encode_features(system.encoder, split, split.query)
    idx = torch.tensor([s.indices for s in samples])
    g = qfeats[idx]
    rec = _transmit(system, g, draws.H, draws.noise, snr_db)
    K = draws.H_mse.shape[0] // len(g)
    g_rep = g.repeat(K, 1, 1)
    rec_mse = _transmit(system, g_rep, draws.H_mse, draws.noise_mse, snr_db)
    mse = float(torch.mean((rec_mse.double() - g_rep.double()) ** 2))
    return g, rec, mse


def per_view_lists(query_feats: np.ndarray, samples, index: RetrievalIndex) -> list[RankedList]:
    lists = []
    for p, s in enumerate(samples):
        for i in range(len(s.indices)):
            lists.append(retrieve(query_feats[p, i], index, s.identities[i], s.camera_ids[i]))
    return lists


def evaluate_learned(system: CoSCSystem, cfg: ExperimentConfig, split: DatasetSplit, samples,
                     draws: EvalDraws, snr_grid, seed: int, method: str) -> list[dict]:
    index = gallery_index(system.encoder, split)
    rows = []
    for snr in snr_grid:
        _, rec, mse = learned_recovery(system, split, samples, draws, snr)
        if method == "cosc":
            queries, fused = cooperative_queries(rec, system.gate, system.fusion, cfg.gate_threshold,
                                                 cfg.multi_user_gating)
        else:
            queries, fused = rec, torch.zeros(rec.shape[:2], dtype=torch.bool)
        lists = per_view_lists(queries.double().numpy(), samples, index)
        row = {"method": method, "snr_db": float(snr), "seed": seed, "feature_mse": mse,
               "symbol_count": cfg.n_symbols, "decode_failure_rate": 0.0, **_metrics(lists)}
        row["fused_fraction"] = float(fused.float().mean())
        rows.append(row)
    return rows


def _encode_images(encoder, split, images_hwc: list) -> np.ndarray:
    arr = np.stack([im.transpose(2, 0, 1).astype(np.float32) / 255.0 for im in images_hwc])
    encoder.eval()
    with torch.no_grad():
        return encoder(_to_tensor(split, arr)).double().numpy()


def baseline_retrieval(outcome, encoder, split: DatasetSplit, index: RetrievalIndex, label, cam) -> RankedList:
    """Retrieve with a reconstructed image encoded at the server; failed decodes miss everywhere."""
    if outcome.failed or outcome.image is None:
        return failed_query(index, label, cam)
    feat = _encode_images(encoder, split, [outcome.image])[0]
    return retrieve(feat, index, label, cam)


def evaluate_classical(method: str, stage1: CoSCSystem, cfg: ExperimentConfig, split: DatasetSplit, samples,
                       draws: EvalDraws, snr_grid, seed: int) -> list[dict]:
    encoder = stage1.encoder
    index = gallery_index(encoder, split)
    chan_cfg = ChannelConfig(cfg.n_users, cfg.n_antennas, cfg.power)
    code = default_code(cfg.ldpc_max_iter)
    clean = encode_features(encoder, split, split.query).double().numpy()
    rows = []
    for snr in snr_grid:
        lists, failures, symbols, sq_err, n_ok = [], 0, [], 0.0, 0
        for p, s in enumerate(samples):
            images = [split.query.load(i) for i in s.indices]
            chan = ChannelRealization(draws.H[p], 0.0)
            gen = torch.Generator().manual_seed(10_007 * seed + 17 * p + 3)
            if method == "digital":
                results = digital_transmit(images, snr, chan_cfg, gen, cfg.jpeg_quality, code, chan=chan)
            else:
                results = softcast_transmit(images, snr, chan_cfg, gen, cfg.softcast_chunk, chan=chan)
            for i, (outcome, budget, _) in enumerate(results):
                symbols.append(budget.complex_symbol_count)
                lists.append(baseline_retrieval(outcome, encoder, split, index, s.identities[i], s.camera_ids[i]))
                if outcome.failed:
                    failures += 1
                else:
                    feat = _encode_images(encoder, split, [outcome.image])[0]
                    sq_err += float(np.mean((feat - clean[s.indices[i]]) ** 2))
                    n_ok += 1
        rows.append({"method": method, "snr_db": float(snr), "seed": seed,
                     "feature_mse": sq_err / n_ok if n_ok else float("nan"),
                     "symbol_count": float(np.mean(symbols)),
                     "decode_failure_rate": failures / len(lists), **_metrics(lists)})
        log.info("%s snr=%s rank1=%.3f fail=%.2f", method, snr, rows[-1]["rank1"], rows[-1]["decode_failure_rate"])
    return rows


def evaluate_seed(cfg: ExperimentConfig, systems: dict, split: DatasetSplit, seed: int,
                  methods=None, snr_grid=None) -> list[dict]:
    """MetricsReport rows for one seed over every requested method and SNR point."""
    methods = list(methods or cfg.methods)
    snr_grid = list(snr_grid if snr_grid is not None else cfg.snr_grid_db)
    samples = eval_pairs(cfg, split, seed)
    draws = make_draws(cfg, len(samples), seed)
    rows = []
    for m in methods:
        if m in LEARNED_METHODS:
            rows += evaluate_learned(systems[m], cfg, split, samples, draws, snr_grid, seed, m)
        else:
            rows += evaluate_classical(m, systems["stage1"], cfg, split, samples, draws, snr_grid, seed)
    return rows


def clean_retrieval(encoder, split: DatasetSplit) -> dict:
    """Rank-n / mAP of the query split against the gallery without any channel."""
    index = gallery_index(encoder, split)
    q = encode_features(encoder, split, split.query).double().numpy()
    lists = [retrieve(q[i], index, split.query.labels[i], split.query.cams[i]) for i in range(len(q))]
    return _metrics(lists)


def summarize(rows, key="rank1") -> dict:
    """Mean of ``key`` over seeds, keyed by (method, snr_db)."""
    acc: dict = {}
    for r in rows:
        acc.setdefault((r["method"], r["snr_db"]), []).append(r[key])
    return {k: float(np.mean(v)) for k, v in acc.items()}
