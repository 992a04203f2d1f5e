from __future__ import annotations

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from mtgc.errors import InvalidSteps, ShapeMismatch, TimestepOutOfRange
from mtgc.fusion import ConditioningEmbedding
from mtgc.mgdd.decoder import DenoiserInputs, denoise_predict, from_model_range, sample, to_model_range
from mtgc.mgdd.diffusion import NoiseSchedule, ddim_sample, ddim_timesteps, forward_noise
from mtgc.mgdd.unet import ControlAdapter, UNet, UNetConfig
from oracles import sqrt_alpha_bar_recursive

CFG = UNetConfig(base_channels=8, mid_channels=16, cond_dim=16, num_heads=2, time_dim=16)


@pytest.fixture(scope="module")
def nets():
    torch.manual_seed(0)
    unet = UNet(CFG).eval()
    return unet, ControlAdapter.from_unet(unet).eval()


def _cond(b: int = 1, s: int = 6, seed: int = 0) -> ConditioningEmbedding:
    g = torch.Generator().manual_seed(seed)
    mask = torch.zeros(b, s, dtype=torch.bool)
    mask[:, :4] = True
    return ConditioningEmbedding(torch.randn(b, s, CFG.cond_dim, generator=g), mask)


def test_schedule_is_monotone_and_bounded():
    sched = NoiseSchedule.linear()
    ab = sched.alphas_cumprod
    assert sched.num_timesteps == 1000
    assert np.all(np.diff(ab) < 0) and 0 < ab[-1] < ab[0] < 1
    assert sched.betas[0] == pytest.approx(1e-4) and sched.betas[-1] == pytest.approx(0.02)


def test_alpha_bar_matches_recursion():
    sched = NoiseSchedule.linear()
    ref = sqrt_alpha_bar_recursive(sched.betas)
    assert np.max(np.abs(np.sqrt(sched.alphas_cumprod) - np.array(ref))) <= 1e-12


def test_forward_noise_endpoints():
    sched = NoiseSchedule.linear()
    x0 = torch.rand(2, 3, 8, 8) * 2 - 1
    eps = torch.randn_like(x0)
    a, s = sched.coefficients(torch.tensor([0]))
    assert torch.allclose(forward_noise(x0, 0, eps, sched), a * x0 + s * eps)
    x_last = forward_noise(x0, 999, eps, sched)
    assert (x_last - eps).abs().max() < 0.02


def test_forward_noise_statistics():
    sched = NoiseSchedule.linear()
    g = torch.Generator().manual_seed(1)
    x0 = torch.full((20000, 1), 0.5, dtype=torch.float64)
    eps = torch.randn(x0.shape, generator=g, dtype=torch.float64)
    t = 400
    xt = forward_noise(x0, t, eps, sched)
    ab = sched.alphas_cumprod[t]
    assert xt.mean().item() == pytest.approx(0.5 * np.sqrt(ab), abs=0.02)
    assert xt.var().item() == pytest.approx(1 - ab, rel=0.05)


def test_timestep_range():
    sched = NoiseSchedule.linear()
    x = torch.zeros(1, 3, 4, 4)
    for bad in (-1, 1000):
        with pytest.raises(TimestepOutOfRange):
            forward_noise(x, bad, x, sched)
    with pytest.raises(TimestepOutOfRange):
        forward_noise(x.repeat(2, 1, 1, 1), torch.tensor([3, 1000]), x.repeat(2, 1, 1, 1), sched)


@given(st.integers(1, 1000))
def test_ddim_timesteps(steps):
    ts = ddim_timesteps(steps)
    assert len(ts) == steps and ts[-1] == 0
    assert np.all(np.diff(ts) < 0) and ts[0] < 1000


@pytest.mark.parametrize("steps", [0, 1001, -3])
def test_invalid_steps(steps, nets):
    unet, adapter = nets
    with pytest.raises(InvalidSteps):
        ddim_timesteps(steps)
    with pytest.raises(InvalidSteps):
        sample(unet, adapter, _cond(), None, steps, 0, 8)


def test_ddim_with_perfect_eps_recovers_x0():
    sched = NoiseSchedule.linear()
    g = torch.Generator().manual_seed(5)
    x0 = torch.rand(1, 3, 8, 8, dtype=torch.float64, generator=g) * 1.6 - 0.8

    def eps_fn(x, t):
        ab = sched.alphas_cumprod[int(t[0])]
        return (x - np.sqrt(ab) * x0) / np.sqrt(1 - ab)

    out = ddim_sample(eps_fn, x0.shape, sched, 20, torch.Generator().manual_seed(9))
    assert torch.allclose(out, x0, atol=1e-9)


def test_fresh_adapter_changes_nothing(nets):
    unet, adapter = nets
    x = torch.randn(2, 3, 16, 16)
    t = torch.tensor([10, 500])
    cond = _cond(2)
    ctrl = torch.rand(2, 3, 4, 4)
    with torch.no_grad():
        plain = denoise_predict(unet, None, DenoiserInputs(x, t, cond), use_control=False)
        ctl = denoise_predict(unet, adapter, DenoiserInputs(x, t, cond, ctrl))
    assert torch.equal(plain, ctl)


def test_trained_adapter_uses_control(nets):
    unet, _ = nets
    adapter = ControlAdapter.from_unet(unet)
    with torch.no_grad():
        for p in adapter.parameters():
            if p.abs().sum() == 0:
                p.normal_(0, 0.1, generator=torch.Generator().manual_seed(2))
    x = torch.randn(1, 3, 16, 16)
    t = torch.tensor([100])
    cond = _cond()
    with torch.no_grad():
        a = denoise_predict(unet, adapter, DenoiserInputs(x, t, cond, torch.zeros(1, 3, 4, 4)))
        b = denoise_predict(unet, adapter, DenoiserInputs(x, t, cond, torch.ones(1, 3, 4, 4)))
    assert not torch.allclose(a, b)


def test_conditioning_matters_and_pad_rows_do_not(nets):
    unet, _ = nets
    x = torch.randn(1, 3, 16, 16)
    t = torch.tensor([250])
    cond = _cond()
    other = _cond(seed=7)
    padded = ConditioningEmbedding(cond.values.clone(), cond.mask)
    padded.values[:, 4:] = 1e3 * torch.randn(1, 2, CFG.cond_dim)
    with torch.no_grad():
        base = denoise_predict(unet, None, DenoiserInputs(x, t, cond), use_control=False)
        moved = denoise_predict(unet, None, DenoiserInputs(x, t, other), use_control=False)
        same = denoise_predict(unet, None, DenoiserInputs(x, t, padded), use_control=False)
    assert not torch.allclose(base, moved)
    assert torch.allclose(base, same, atol=1e-6)


def test_shape_checks(nets):
    unet, adapter = nets
    cond = _cond()
    t = torch.tensor([1])
    with pytest.raises(ShapeMismatch):
        denoise_predict(unet, None, DenoiserInputs(torch.zeros(1, 3, 10, 10), t, cond), use_control=False)
    with pytest.raises(ShapeMismatch):
        bad = ConditioningEmbedding(torch.zeros(1, 6, CFG.cond_dim + 1), cond.mask)
        denoise_predict(unet, None, DenoiserInputs(torch.zeros(1, 3, 16, 16), t, bad), use_control=False)
    with pytest.raises(ShapeMismatch):
        denoise_predict(unet, adapter, DenoiserInputs(torch.zeros(1, 3, 16, 16), t, cond, None))


@pytest.mark.parametrize("steps", [10, 30, 50])
def test_sampler_is_deterministic(nets, steps):
    unet, adapter = nets
    cond = _cond()
    ctrl = torch.rand(1, 3, 8, 8)
    a = sample(unet, adapter, cond, ctrl, steps, seed=11, resolution=16)
    b = sample(unet, adapter, cond, ctrl, steps, seed=11, resolution=16)
    assert a.shape == (1, 3, 16, 16)
    assert torch.equal(a, b)
    assert a.min() >= 0 and a.max() <= 1


def test_seed_changes_sample(nets):
    unet, adapter = nets
    a = sample(unet, adapter, _cond(), None, 10, seed=1, resolution=16)
    b = sample(unet, adapter, _cond(), None, 10, seed=2, resolution=16)
    assert not torch.equal(a, b)


def test_model_range_roundtrip():
    x = torch.rand(2, 3, 4, 4)
    assert torch.allclose(from_model_range(to_model_range(x)), x, atol=1e-7)
