"""SoftCast analog baseline: full-frame DCT, chunk power scaling, LLSE decoding.

Chunk variances travel out of band (error free), as in the original scheme.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy.fft import dctn, idctn

from ..channel import (ChannelRealization, apply_channel, as_generator, mmse_detect, mmse_effective_gain,
                       sample_channel, snr_to_noise_variance)
from .digital import ChannelConfig, ReconstructionOutcome, SymbolBudget, psnr


@dataclass
class SoftCastFrame:
    shape: tuple
    chunk: int
    energy: np.ndarray   # per-chunk mean-square DCT coefficient, (C, nH, nW)
    gain: np.ndarray     # per-chunk scaling factor
    active: np.ndarray   # chunks actually transmitted (nonzero energy)

    @property
    def n_coefficients(self) -> int:
        return int(self.active.sum()) * self.chunk * self.chunk

    @property
    def complex_symbols(self) -> int:
        return -(-self.n_coefficients // 2)


def _to_chunks(coef: np.ndarray, chunk: int) -> np.ndarray:
    c, h, w = coef.shape
    if h % chunk or w % chunk:
        raise ValueError(f"image size {h}x{w} is not a multiple of the chunk size {chunk}")
    return coef.reshape(c, h // chunk, chunk, w // chunk, chunk).transpose(0, 1, 3, 2, 4)


def _from_chunks(chunks: np.ndarray) -> np.ndarray:
    c, nh, nw, k, _ = chunks.shape
    return chunks.transpose(0, 1, 3, 2, 4).reshape(c, nh * k, nw * k)


def softcast_encode(image: np.ndarray, chunk: int = 8, power: float = 1.0):
    """(C, H, W) image in [0, 1] -> (interleaved real symbols, frame metadata).

    Chunk i is scaled by ``g_i ~ energy_i^(-1/4)`` so that the mean complex-symbol
    power is ``power``.
    """
    image = np.asarray(image, dtype=np.float64)
    coef = dctn(image, axes=(1, 2), norm="ortho")
    chunks = _to_chunks(coef, chunk)
    energy = np.mean(chunks ** 2, axis=(3, 4))
    active = energy > 0
    n_per = chunk * chunk
    n_tx = int(active.sum()) * n_per
    budget = n_tx * power / 2.0
    gain = np.zeros_like(energy)
    gain[active] = energy[active] ** -0.25 * np.sqrt(budget / (n_per * np.sum(np.sqrt(energy[active]))))
    symbols = (chunks * gain[..., None, None])[active].ravel()
    if symbols.size % 2:
        symbols = np.concatenate([symbols, [0.0]])
    return symbols, SoftCastFrame(image.shape, chunk, energy, gain, active)


def softcast_decode(received: np.ndarray, frame: SoftCastFrame, noise_var_real) -> np.ndarray:
    """LLSE estimate of the image from unbiased received reals with per-real noise variance."""
    n = frame.n_coefficients
    y = np.asarray(received, dtype=np.float64)[:n].reshape(-1, frame.chunk, frame.chunk)
    g = frame.gain[frame.active][:, None, None]
    lam = frame.energy[frame.active][:, None, None]
    est = g * lam / (g * g * lam + noise_var_real) * y
    chunks = np.zeros(frame.energy.shape + (frame.chunk, frame.chunk))
    chunks[frame.active] = est
    return idctn(_from_chunks(chunks), axes=(1, 2), norm="ortho")


def softcast_transmit(images, snr_db: float, chan_config: ChannelConfig = ChannelConfig(), rng=None,
                      chunk: int = 8, chan: ChannelRealization | None = None):
    """Send one image per user over a shared channel; returns (outcome, budget, frame) per user.

    Shorter symbol streams are zero padded. One fading realization spans the transmission.
    """
    gen = as_generator(rng)
    n = len(images)
    if n != chan_config.n_users:
        raise ValueError(f"{n} images for {chan_config.n_users} users")
    imgs = [np.asarray(im, dtype=np.float64) for im in images]
    encoded = [softcast_encode(im, chunk, chan_config.power) for im in imgs]
    length = max(s.size for s, _ in encoded)
    X = np.zeros((n, length))
    for i, (s, _) in enumerate(encoded):
        X[i, :s.size] = s
    nv = snr_to_noise_variance(snr_db, chan_config.power)
    chan = sample_channel(n, chan_config.n_antennas, gen, nv) if chan is None else ChannelRealization(chan.H, nv)
    Y = apply_channel(torch.from_numpy(X), chan, gen)
    x_hat = mmse_detect(Y, chan, chan_config.power).numpy()
    mu, v = mmse_effective_gain(chan, chan_config.power)
    results = []
    for i, (_, frame) in enumerate(encoded):
        m = mu[i].item()
        unbiased = x_hat[i] / m
        noise_real = v[i].item() / (2.0 * m * m)
        rec = softcast_decode(unbiased, frame, noise_real)
        out8 = (np.clip(rec, 0, 1) * 255).round().astype(np.uint8).transpose(1, 2, 0)
        ref8 = (np.clip(imgs[i], 0, 1) * 255).round().astype(np.uint8).transpose(1, 2, 0)
        outcome = ReconstructionOutcome(out8, False, psnr(ref8, out8), raw=rec)
        results.append((outcome, SymbolBudget(frame.complex_symbols), frame))
    return results


def softcast_pipeline(image, snr_db: float, chan_config: ChannelConfig = ChannelConfig(), rng=None,
                      chunk: int = 8):
    """Single-image SoftCast link (other users send the same image; user 0 is scored)."""
    outcome, budget, _ = softcast_transmit([image] * chan_config.n_users, snr_db, chan_config, rng, chunk)[0]
    return outcome, budget
