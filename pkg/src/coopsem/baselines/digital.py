"""Digital baseline: JPEG source coding, rate-3/4 LDPC, BPSK over the multi-user uplink.

Two coded bits ride on each complex symbol (one per real dimension), so symbol
counts are directly comparable with the B complex symbols of the learned path.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
import torch
from PIL import Image

from ..channel import (ChannelRealization, apply_channel, as_generator, mmse_detect, mmse_effective_gain,
                       sample_channel, snr_to_noise_variance)
from .ldpc import QCLDPCCode

_LLR_CLIP = 50.0


@dataclass(frozen=True)
class ChannelConfig:
    n_users: int = 2
    n_antennas: int = 4
    power: float = 1.0


@dataclass
class SymbolBudget:
    complex_symbol_count: int

    def __post_init__(self):
        if self.complex_symbol_count <= 0:
            raise ValueError("symbol count must be positive")


@dataclass
class ReconstructionOutcome:
    image: np.ndarray | None
    failed: bool
    psnr: float | None = None
    bit_exact: bool = False
    raw: np.ndarray | None = None


@dataclass
class DigitalTrace:
    jpeg_bytes: int
    info_bits: int
    n_blocks: int
    coded_bits: int
    complex_symbols: int
    failed_blocks: int = 0


_CODE_CACHE: dict = {}


def default_code(max_iter: int = 50) -> QCLDPCCode:
    if max_iter not in _CODE_CACHE:
        _CODE_CACHE[max_iter] = QCLDPCCode(max_iter=max_iter)
    return _CODE_CACHE[max_iter]


def to_uint8_hwc(image) -> np.ndarray:
    """Accept (C, H, W) floats in [0, 1] or (H, W, C) uint8."""
    a = np.asarray(image)
    if a.dtype != np.uint8:
        a = (np.clip(a, 0, 1) * 255).round().astype(np.uint8)
        if a.ndim == 3 and a.shape[0] in (1, 3):
            a = a.transpose(1, 2, 0)
    return a


def psnr(ref: np.ndarray, test: np.ndarray, peak: float = 255.0) -> float:
    mse = np.mean((ref.astype(np.float64) - test.astype(np.float64)) ** 2)
    return float("inf") if mse == 0 else float(10 * np.log10(peak ** 2 / mse))


def jpeg_encode(image, quality: int = 90) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(to_uint8_hwc(image)).save(buf, format="JPEG", quality=quality)
    return buf.getvalue()


def jpeg_decode(data: bytes) -> np.ndarray:
    with Image.open(io.BytesIO(data)) as im:
        im.load()
        return np.asarray(im.convert("RGB"))


def bpsk_modulate(bits: np.ndarray) -> np.ndarray:
    """{0, 1} -> {+1, -1}/sqrt(2) per real dimension; returns interleaved reals (unit complex power)."""
    bits = np.asarray(bits)
    if bits.size % 2:
        bits = np.concatenate([bits, [0]])
    return (1.0 - 2.0 * bits) / np.sqrt(2.0)


def bpsk_hard_demodulate(reals: np.ndarray) -> np.ndarray:
    return (np.asarray(reals) < 0).astype(np.uint8)


def _encode_stream(data: bytes, code: QCLDPCCode):
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8))
    n_blocks = -(-bits.size // code.k)
    info = np.zeros(n_blocks * code.k, dtype=np.uint8)
    info[:bits.size] = bits
    coded = code.encode(info.reshape(n_blocks, code.k)).ravel()
    trace = DigitalTrace(len(data), bits.size, n_blocks, coded.size, -(-coded.size // 2))
    return coded, trace


def digital_transmit(images, snr_db: float, chan_config: ChannelConfig = ChannelConfig(), rng=None,
                     quality: int = 90, code: QCLDPCCode | None = None,
                     chan: ChannelRealization | None = None, decode_users=None):
    """Send one image per user simultaneously; returns a list of (outcome, budget, trace).

    Users with shorter streams pad with random BPSK symbols so every user
    occupies the same symbol times. One fading realization spans the whole
    transmission.
    """
    code = code or default_code()
    gen = as_generator(rng)
    n = len(images)
    if n != chan_config.n_users:
        raise ValueError(f"{n} images for {chan_config.n_users} users")
    originals = [to_uint8_hwc(im) for im in images]
    payloads = [jpeg_encode(im, quality) for im in originals]
    streams, traces = zip(*(_encode_stream(p, code) for p in payloads))
    length = max(s.size for s in streams)
    length += length % 2
    X = np.empty((n, length))
    for i, s in enumerate(streams):
        filler = torch.randint(0, 2, (length - s.size,), generator=gen).numpy()
        X[i] = bpsk_modulate(np.concatenate([s, filler]))
    nv = snr_to_noise_variance(snr_db, chan_config.power)
    if chan is None:
        chan = sample_channel(n, chan_config.n_antennas, gen, nv)
    else:
        chan = ChannelRealization(chan.H, nv)
    X_t = torch.from_numpy(X) * np.sqrt(chan_config.power)
    Y = apply_channel(X_t, chan, gen)
    x_hat = mmse_detect(Y, chan, chan_config.power).numpy()
    mu, v = mmse_effective_gain(chan, chan_config.power)
    results = []
    for i in (range(n) if decode_users is None else decode_users):
        tr = traces[i]
        amp = mu[i].item() * np.sqrt(chan_config.power / 2.0)
        var = max(v[i].item() / 2.0, 1e-12)
        llr = np.clip(2.0 * amp * x_hat[i, :tr.coded_bits] / var, -_LLR_CLIP, _LLR_CLIP)
        hard, ok = code.decode(llr.reshape(tr.n_blocks, code.n))
        tr.failed_blocks = int((~ok).sum())
        budget = SymbolBudget(tr.complex_symbols)
        if tr.failed_blocks:
            results.append((ReconstructionOutcome(None, True), budget, tr))
            continue
        bits = hard[:, :code.k].ravel()[:tr.info_bits]
        data = np.packbits(bits).tobytes()
        try:
            img = jpeg_decode(data)
        except Exception:
            results.append((ReconstructionOutcome(None, True), budget, tr))
            continue
        if img.shape != originals[i].shape:
            results.append((ReconstructionOutcome(None, True), budget, tr))
            continue
        results.append((ReconstructionOutcome(img, False, psnr(originals[i], img), data == payloads[i]), budget, tr))
    return results


def digital_pipeline(image, snr_db: float, chan_config: ChannelConfig = ChannelConfig(), rng=None,
                     quality: int = 90, code: QCLDPCCode | None = None):
    """Single-image digital link. The other users send the same image, so the
    shared channel carries a full multi-user load; only user 0 is decoded."""
    images = [image] * chan_config.n_users
    outcome, budget, _ = digital_transmit(images, snr_db, chan_config, rng, quality, code, decode_users=[0])[0]
    return outcome, budget
