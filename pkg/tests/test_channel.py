import math

import numpy as np
import pytest
import torch
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from coopsem.channel import (ChannelRealization, NoiseSpec, apply_channel, complex_to_real, mmse_detect,
                             mmse_effective_gain, normalize_power, real_to_complex, sample_channel,
                             snr_to_noise_variance, stack_blocks)
from coopsem.errors import DegenerateSymbolError, ShapeError, SingularChannelError


def _closed_form_2x2(H, noise_var, power):
    """(H^H H + s I)^-1 H^H with the 2x2 inverse written out as adj / det."""
    s = noise_var / power
    A = H.conj().T @ H
    a, b, c, d = A[0, 0] + s, A[0, 1], A[1, 0], A[1, 1] + s
    det = a * d - b * c
    inv = np.array([[d, -b], [-c, a]]) / det
    return inv @ H.conj().T


def test_mmse_matches_hand_derived_2x2():
    # H = [[1, j], [0, 2]], sigma^2 = 0.5, P = 1:
    # H^H H + 0.5 I = [[1.5, j], [-j, 5.5]], det = 7.25, W = [[4.5, -2j], [-0.5j, 3]] / 7.25
    H = torch.tensor([[1, 1j], [0, 2]], dtype=torch.complex128)
    chan = ChannelRealization(H, 0.5)
    W = mmse_detect(torch.eye(2, dtype=torch.complex128), chan, 1.0)
    expected = np.array([[4.5, 0, 0, -2], [0, -0.5, 3, 0]]) / 7.25
    np.testing.assert_allclose(W.numpy(), expected, atol=1e-12)


@pytest.mark.parametrize("trial", range(20))
def test_mmse_matches_closed_form_random_2x2(trial):
    gen = torch.Generator().manual_seed(trial)
    chan = sample_channel(2, 2, gen, noise_variance=0.1 + trial * 0.05)
    power = 0.5 + 0.1 * trial
    Y = torch.complex(torch.randn(2, 6, generator=gen, dtype=torch.float64),
                      torch.randn(2, 6, generator=gen, dtype=torch.float64))
    got = real_to_complex(mmse_detect(Y, chan, power)).numpy()
    W = _closed_form_2x2(chan.H.numpy(), chan.noise_variance, power)
    np.testing.assert_allclose(got, W @ Y.numpy(), atol=1e-9, rtol=0)


def test_noiseless_full_rank_recovery():
    gen = torch.Generator().manual_seed(3)
    chan = sample_channel(2, 4, gen, 0.0, batch_shape=(50,))
    X = normalize_power(torch.randn(50, 2, 32, generator=gen, dtype=torch.float64))
    X_hat = mmse_detect(apply_channel(X, chan), chan)
    assert torch.max(torch.abs(X_hat - X)) < 1e-6


def test_noiseless_rank_deficient_raises():
    h = torch.tensor([[1.0 + 1j], [0.5], [2j], [1.0]], dtype=torch.complex128)
    chan = ChannelRealization(torch.cat([h, 2 * h], dim=1), 0.0)
    with pytest.raises(SingularChannelError):
        mmse_detect(torch.zeros(4, 3, dtype=torch.complex128), chan)


def test_power_normalization_on_many_blocks():
    gen = torch.Generator().manual_seed(0)
    raw = torch.randn(10_000, 16, generator=gen, dtype=torch.float64) * torch.rand(10_000, 1, generator=gen) * 5
    out = normalize_power(raw, power=1.0)
    per_block = out.pow(2).sum(-1) / 8
    assert torch.max(torch.abs(per_block - 1.0)) < 1e-6


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 12).map(lambda b: 2 * b)),
              elements=st.floats(-1e3, 1e3)),
       st.floats(0.1, 10.0))
def test_normalization_property(raw, power):
    energy = (raw ** 2).sum(-1)
    assume(np.all(energy > 1e-12))
    out = normalize_power(raw, power).numpy()
    np.testing.assert_allclose((out ** 2).sum(-1) / (raw.shape[-1] // 2), power, rtol=1e-9)
    # direction is preserved
    np.testing.assert_allclose(out * np.sqrt(energy)[:, None], raw * np.linalg.norm(out, axis=-1)[:, None],
                               atol=1e-6 * max(1.0, np.abs(raw).max()))


@settings(max_examples=40, deadline=None)
@given(st.floats(0.01, 100.0), st.integers(0, 2**31 - 1))
def test_normalization_is_scale_invariant(scale, seed):
    raw = torch.randn(3, 10, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
    torch.testing.assert_close(normalize_power(raw * scale), normalize_power(raw), rtol=1e-9, atol=1e-12)


def test_normalization_errors():
    with pytest.raises(DegenerateSymbolError):
        normalize_power(torch.zeros(2, 8))
    with pytest.raises(ShapeError):
        normalize_power(torch.ones(2, 7))


def test_fading_coefficient_power():
    chan = sample_channel(2, 4, torch.Generator().manual_seed(11), batch_shape=(12_500,))
    h = chan.H.flatten()
    assert h.numel() == 100_000
    assert abs(float(torch.mean(h.abs() ** 2)) - 1.0) < 0.01
    # circular symmetry: real and imaginary parts each carry half the power
    assert abs(float(torch.mean(h.real ** 2)) - 0.5) < 0.01


@pytest.mark.parametrize("snr_db", [-6.0, 0.0, 12.0])
def test_noise_power(snr_db):
    nv = snr_to_noise_variance(snr_db)
    chan = sample_channel(2, 4, torch.Generator().manual_seed(5), nv, batch_shape=(10_000,))
    X = torch.zeros(10_000, 2, 2, dtype=torch.float64)
    n = apply_channel(X, chan, torch.Generator().manual_seed(6))
    assert abs(float(torch.mean(n.abs() ** 2)) / nv - 1.0) < 0.03


def test_snr_definition():
    assert snr_to_noise_variance(0.0) == pytest.approx(1.0)
    assert snr_to_noise_variance(10.0, power=2.0) == pytest.approx(0.2)
    assert snr_to_noise_variance(NoiseSpec(-3.0, 1.0)) == pytest.approx(10 ** 0.3)
    np.testing.assert_allclose(snr_to_noise_variance(np.array([0.0, 20.0])), [1.0, 0.01])
    torch.testing.assert_close(snr_to_noise_variance(torch.tensor([0.0, 10.0], dtype=torch.float64)),
                               torch.tensor([1.0, 0.1], dtype=torch.float64))
    with pytest.raises(ValueError):
        snr_to_noise_variance(0.0, power=0.0)


def test_real_complex_interleaving():
    x = torch.tensor([1.0, 2.0, 3.0, 4.0])
    z = real_to_complex(x)
    assert torch.equal(z, torch.tensor([1 + 2j, 3 + 4j]))
    assert torch.equal(complex_to_real(z), x)
    with pytest.raises(ShapeError):
        real_to_complex(torch.ones(3))


def test_apply_channel_matches_matrix_product():
    gen = torch.Generator().manual_seed(2)
    chan = sample_channel(2, 4, gen)
    X = torch.randn(2, 6, generator=gen, dtype=torch.float64)
    Y = apply_channel(X, chan)
    expected = chan.H.numpy() @ (X[:, 0::2] + 1j * X[:, 1::2]).numpy()
    np.testing.assert_allclose(Y.numpy(), expected, atol=1e-12)
    with pytest.raises(ShapeError):
        apply_channel(torch.ones(3, 6), chan)


def test_stack_blocks_rejects_mismatch():
    assert stack_blocks([np.ones(4), np.ones(4)]).shape == (2, 4)
    with pytest.raises(ShapeError):
        stack_blocks([np.ones(4), np.ones(6)])


def test_detection_mse_decreases_with_snr():
    gen = torch.Generator().manual_seed(8)
    chan = sample_channel(2, 4, gen, batch_shape=(2000,))
    X = normalize_power(torch.randn(2000, 2, 16, generator=gen, dtype=torch.float64))
    unit = torch.complex(torch.randn(2000, 4, 8, generator=gen, dtype=torch.float64),
                         torch.randn(2000, 4, 8, generator=gen, dtype=torch.float64)) / math.sqrt(2)
    mses = []
    for snr in (-6, -3, 0, 6, 12, 18):
        nv = snr_to_noise_variance(snr)
        c = ChannelRealization(chan.H, nv)
        X_hat = mmse_detect(apply_channel(X, c, noise=math.sqrt(nv) * unit), c)
        mses.append(float(torch.mean((X_hat - X) ** 2)))
    assert all(a > b for a, b in zip(mses, mses[1:]))


def test_effective_gain_matches_monte_carlo():
    H = sample_channel(2, 4, torch.Generator().manual_seed(9)).H
    chan = ChannelRealization(H, 0.5)
    mu, v = mmse_effective_gain(chan)
    gen = torch.Generator().manual_seed(10)
    X = normalize_power(torch.randn(2, 40_000, generator=gen, dtype=torch.float64))
    x_hat = real_to_complex(mmse_detect(apply_channel(X, chan, gen), chan))
    x = real_to_complex(X)
    for k in range(2):
        fit = torch.sum(x_hat[k] * x[k].conj()) / torch.sum(x[k].abs() ** 2)
        assert abs(fit.real.item() - mu[k].item()) < 0.01
        resid = x_hat[k] - mu[k] * x[k]
        assert float(torch.mean(resid.abs() ** 2)) == pytest.approx(v[k].item(), rel=0.03)


def test_detection_is_differentiable():
    gen = torch.Generator().manual_seed(12)
    chan = sample_channel(2, 4, gen, noise_variance=0.3)
    noise = torch.complex(torch.randn(4, 3, generator=gen, dtype=torch.float64),
                          torch.randn(4, 3, generator=gen, dtype=torch.float64))
    X = torch.randn(2, 6, dtype=torch.float64, generator=gen, requires_grad=True)

    def f(x):
        return mmse_detect(apply_channel(normalize_power(x), chan, noise=noise), chan)

    assert torch.autograd.gradcheck(f, (X,))


def test_record_round_trip():
    chan = sample_channel(2, 4, torch.Generator().manual_seed(4), noise_variance=0.25)
    back = ChannelRealization.from_record(chan.to_record())
    assert torch.equal(back.H, chan.H)
    assert back.noise_variance == 0.25
    batched = ChannelRealization(chan.H.expand(3, 4, 2), torch.tensor([0.1, 0.2, 0.3], dtype=torch.float64))
    back = ChannelRealization.from_record(batched.to_record())
    torch.testing.assert_close(back.noise_variance, batched.noise_variance)


def test_per_sample_noise_variance_broadcasts():
    gen = torch.Generator().manual_seed(13)
    nv = torch.tensor([1e-8, 10.0], dtype=torch.float64)
    chan = sample_channel(2, 4, gen, nv, batch_shape=(2,))
    X = normalize_power(torch.randn(2, 2, 2000, generator=gen, dtype=torch.float64))
    err = ((mmse_detect(apply_channel(X, chan, gen), chan) - X) ** 2).mean(dim=(1, 2))
    assert err[0] < 1e-6 < err[1]
