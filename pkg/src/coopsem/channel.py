"""Multi-user uplink: power normalization, Rayleigh block fading, AWGN, MMSE detection.

Symbol blocks are real tensors of length 2B whose consecutive pairs
``(x[2k], x[2k+1])`` are the real and imaginary parts of complex symbol k.
All operations are written in torch so they can sit inside a training graph;
they also accept numpy arrays and broadcast over leading batch dimensions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import DegenerateSymbolError, ShapeError, SingularChannelError


@dataclass(frozen=True)
class NoiseSpec:
    snr_db: float
    power: float = 1.0

    def __post_init__(self):
        if self.power <= 0:
            raise ValueError("transmit power must be positive")


@dataclass
class ChannelRealization:
    """Fading matrix ``H`` of shape (..., M, N) plus the noise variance."""

    H: torch.Tensor
    noise_variance: float | torch.Tensor = 0.0

    @property
    def n_antennas(self) -> int:
        return self.H.shape[-2]

    @property
    def n_users(self) -> int:
        return self.H.shape[-1]

    def to_record(self) -> dict:
        H = self.H.detach().cpu().to(torch.complex128)
        nv = self.noise_variance
        if isinstance(nv, torch.Tensor):
            nv = nv.detach().cpu().double().tolist()
        return {
            "H_real": H.real.tolist(),
            "H_imag": H.imag.tolist(),
            "noise_variance": nv,
        }

    @classmethod
    def from_record(cls, record: dict) -> "ChannelRealization":
        H = torch.complex(
            torch.tensor(record["H_real"], dtype=torch.float64),
            torch.tensor(record["H_imag"], dtype=torch.float64),
        )
        nv = record["noise_variance"]
        if isinstance(nv, list):
            nv = torch.tensor(nv, dtype=torch.float64)
        return cls(H, nv)


def as_generator(rng) -> torch.Generator:
    if isinstance(rng, torch.Generator):
        return rng
    gen = torch.Generator()
    gen.manual_seed(int(rng) if rng is not None else torch.seed())
    return gen


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x), dtype=torch.float64)


def real_to_complex(x: torch.Tensor) -> torch.Tensor:
    if x.shape[-1] % 2:
        raise ShapeError(f"real symbol length must be even, got {x.shape[-1]}")
    return torch.complex(x[..., 0::2], x[..., 1::2])


def complex_to_real(z: torch.Tensor) -> torch.Tensor:
    return torch.stack([z.real, z.imag], dim=-1).flatten(-2)


def snr_to_noise_variance(snr_db, power: float = 1.0):
    """Noise variance for a per-user transmit SNR of ``power / sigma^2``."""
    if isinstance(snr_db, NoiseSpec):
        snr_db, power = snr_db.snr_db, snr_db.power
    if power <= 0:
        raise ValueError("transmit power must be positive")
    if isinstance(snr_db, torch.Tensor):
        return power / torch.pow(10.0, snr_db / 10.0)
    if np.ndim(snr_db):
        return power / 10.0 ** (np.asarray(snr_db, dtype=np.float64) / 10.0)
    return power / 10.0 ** (float(snr_db) / 10.0)


def normalize_power(raw, power: float = 1.0) -> torch.Tensor:
    """Scale each block (last axis, length 2B) so its mean complex-symbol power is ``power``."""
    raw = _as_tensor(raw)
    if raw.shape[-1] % 2 or raw.shape[-1] == 0:
        raise ShapeError(f"symbol block length must be a positive even number, got {raw.shape[-1]}")
    n_sym = raw.shape[-1] // 2
    energy = raw.pow(2).sum(dim=-1, keepdim=True)
    if bool((energy == 0).any()):
        raise DegenerateSymbolError("zero-energy symbol block cannot meet the power constraint")
    return raw * torch.sqrt(power * n_sym / energy)


def sample_channel(n_users: int, n_antennas: int, rng=None, noise_variance=0.0,
                   batch_shape=(), dtype=torch.complex128) -> ChannelRealization:
    """Draw i.i.d. CN(0, 1) fading coefficients of shape (*batch_shape, M, N)."""
    if n_users < 1 or n_antennas < 1:
        raise ShapeError("need at least one user and one antenna")
    gen = as_generator(rng)
    real_dtype = torch.float64 if dtype == torch.complex128 else torch.float32
    shape = (*tuple(batch_shape), n_antennas, n_users)
    re = torch.randn(shape, generator=gen, dtype=real_dtype)
    im = torch.randn(shape, generator=gen, dtype=real_dtype)
    H = torch.complex(re, im) / np.sqrt(2.0)
    return ChannelRealization(H.to(dtype), noise_variance)


def _noise_var_tensor(noise_variance, like: torch.Tensor) -> torch.Tensor:
    nv = torch.as_tensor(noise_variance, dtype=like.real.dtype if like.is_complex() else like.dtype)
    return nv[..., None, None] if nv.ndim else nv


def apply_channel(X, chan: ChannelRealization, rng=None, noise: torch.Tensor | None = None) -> torch.Tensor:
    """Received signal ``Y = H x_b + n_b`` for every symbol time b.

    ``X`` has shape (..., N, 2B); the result is complex with shape (..., M, B).
    ``noise`` overrides the sampled AWGN (used for deterministic gradient checks).
    """
    X = _as_tensor(X)
    if X.ndim < 2:
        raise ShapeError("X must have shape (..., N, 2B)")
    if X.shape[-2] != chan.n_users:
        raise ShapeError(f"{X.shape[-2]} symbol blocks for a channel with {chan.n_users} users")
    x = real_to_complex(X)
    H = chan.H.to(x.dtype)
    Y = H @ x
    if noise is not None:
        return Y + noise.to(Y.dtype)
    nv = _noise_var_tensor(chan.noise_variance, Y)
    if not bool(torch.all(nv == 0)):
        gen = as_generator(rng)
        re = torch.randn(Y.shape, generator=gen, dtype=Y.real.dtype)
        im = torch.randn(Y.shape, generator=gen, dtype=Y.real.dtype)
        Y = Y + torch.sqrt(nv / 2.0) * torch.complex(re, im)
    return Y


def stack_blocks(blocks) -> torch.Tensor:
    """Stack per-user symbol blocks into (N, 2B), rejecting mismatched lengths."""
    blocks = [_as_tensor(b) for b in blocks]
    lengths = {b.shape[-1] for b in blocks}
    if len(lengths) != 1:
        raise ShapeError(f"users transmit blocks of different lengths: {sorted(lengths)}")
    return torch.stack(blocks, dim=-2)


def _mmse_filter(chan: ChannelRealization, power: float, dtype) -> torch.Tensor:
    H = chan.H.to(dtype)
    n_users = H.shape[-1]
    nv = _noise_var_tensor(chan.noise_variance, H)
    if bool(torch.all(nv == 0)):
        rank = torch.linalg.matrix_rank(H)
        if bool((rank < n_users).any()):
            raise SingularChannelError("noiseless channel with rank-deficient H")
    Hh = H.mH
    eye = torch.eye(n_users, dtype=H.dtype)
    A = Hh @ H + (nv / power) * eye
    return torch.linalg.solve(A, Hh)


def mmse_detect(Y: torch.Tensor, chan: ChannelRealization, power: float = 1.0) -> torch.Tensor:
    """Linear MMSE estimate ``(H^H H + sigma^2/P I)^-1 H^H Y`` as real (..., N, 2B)."""
    if Y.shape[-2] != chan.n_antennas:
        raise ShapeError(f"Y has {Y.shape[-2]} rows but H has {chan.n_antennas} antennas")
    W = _mmse_filter(chan, power, Y.dtype)
    return complex_to_real(W @ Y)


def mmse_effective_gain(chan: ChannelRealization, power: float = 1.0):
    """Per-user bias and residual variance after MMSE detection.

    The estimate of user k is ``mu_k x_k + e_k`` where ``e_k`` collects
    inter-user leakage and filtered noise with variance ``v_k`` (per complex
    symbol). Returns ``(mu, v)`` with shape (..., N).
    """
    W = _mmse_filter(chan, power, torch.complex128)
    H = chan.H.to(torch.complex128)
    G = W @ H
    mu = torch.diagonal(G, dim1=-2, dim2=-1).real
    leak = power * (G.abs() ** 2).sum(-1) - power * torch.diagonal(G, dim1=-2, dim2=-1).abs() ** 2
    nv = torch.as_tensor(chan.noise_variance, dtype=torch.float64)
    if nv.ndim:
        nv = nv[..., None]
    noise = nv * (W.abs() ** 2).sum(-1)
    return mu, leak + noise
