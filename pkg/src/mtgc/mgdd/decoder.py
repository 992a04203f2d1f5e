"""Dual-path conditional denoiser: cross-attention on the fused caption plus adapter residuals."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from mtgc.errors import InvalidSteps, ShapeMismatch
from mtgc.fusion import ConditioningEmbedding
from mtgc.layers import interpolate_bilinear
from mtgc.mgdd.diffusion import NoiseSchedule, ddim_sample
from mtgc.mgdd.unet import ControlAdapter, UNet


@dataclass
class DenoiserInputs:
    x_t: torch.Tensor  # [B, 3, R, R] in the model's [-1, 1] range
    t: torch.Tensor  # [B] long
    cond: ConditioningEmbedding
    control: torch.Tensor | None = None  # [B, 3, h, w] decoded HCI in [0, 1]


def to_model_range(x: torch.Tensor) -> torch.Tensor:
    return x * 2.0 - 1.0


def from_model_range(x: torch.Tensor) -> torch.Tensor:
    return ((x + 1.0) * 0.5).clamp(0.0, 1.0)


def prepare_control(control: torch.Tensor, resolution: int) -> torch.Tensor:
    """Bilinear resize of the decoded HCI to the denoiser grid, mapped to [-1, 1]."""
    if control.ndim == 3:
        control = control[None]
    return to_model_range(interpolate_bilinear(control.float(), resolution))


def _validate(unet: UNet, inp: DenoiserInputs) -> None:
    x = inp.x_t
    if x.ndim != 4 or x.shape[1] != unet.cfg.in_channels or x.shape[-1] % 4 or x.shape[-2] % 4:
        raise ShapeMismatch(f"x_t has shape {tuple(x.shape)}")
    if inp.cond.values.shape[-1] != unet.cfg.cond_dim:
        raise ShapeMismatch(f"conditioning width {inp.cond.values.shape[-1]} != {unet.cfg.cond_dim}")
    if inp.cond.values.shape[0] != x.shape[0] or inp.t.shape[0] != x.shape[0]:
        raise ShapeMismatch("batch sizes of x_t, t and cond differ")


def denoise_predict(
    unet: UNet,
    adapter: ControlAdapter | None,
    inp: DenoiserInputs,
    use_control: bool = True,
) -> torch.Tensor:
    """Predicted noise for ``inp.x_t``.

    With ``use_control`` the adapter sees the control image and its residuals are
    added to the main network's skip and middle features.
    """
    _validate(unet, inp)
    residuals = None
    if use_control:
        if adapter is None or inp.control is None:
            raise ShapeMismatch("use_control needs both an adapter and a control image")
        control = prepare_control(inp.control, inp.x_t.shape[-1])
        if control.shape[0] != inp.x_t.shape[0]:
            raise ShapeMismatch("control batch differs from x_t batch")
        residuals = adapter(inp.x_t, inp.t, inp.cond.values, inp.cond.mask, control)
    return unet(inp.x_t, inp.t, inp.cond.values, inp.cond.mask, residuals)


def sample(
    unet: UNet,
    adapter: ControlAdapter | None,
    cond: ConditioningEmbedding,
    control: torch.Tensor | None,
    steps: int,
    seed: int,
    resolution: int,
    sched: NoiseSchedule | None = None,
) -> torch.Tensor:
    """Deterministic DDIM reconstruction in [0, 1], shape ``[B, 3, R, R]``."""
    sched = sched or NoiseSchedule.linear()
    if not 1 <= steps <= sched.num_timesteps:
        raise InvalidSteps(f"steps must lie in [1, {sched.num_timesteps}], got {steps}")
    b = cond.values.shape[0]
    gen = torch.Generator().manual_seed(seed)
    use_control = control is not None and adapter is not None
    ctrl = prepare_control(control, resolution) if use_control else None

    def eps_fn(x, t):
        inp = DenoiserInputs(x, t, cond, None)
        _validate(unet, inp)
        res = None
        if use_control:
            res = adapter(x, t, cond.values, cond.mask, ctrl)
        return unet(x, t, cond.values, cond.mask, res)

    with torch.no_grad():
        x = ddim_sample(eps_fn, (b, unet.cfg.in_channels, resolution, resolution), sched, steps, gen)
    return from_model_range(x)
