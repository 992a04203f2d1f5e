"""Forward noising process and the deterministic sampler."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from mtgc.errors import InvalidSteps, TimestepOutOfRange

NUM_TIMESTEPS = 1000
BETA_START = 1e-4
BETA_END = 0.02


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear beta schedule with its cumulative signal-retention coefficients.

    ``alphas_cumprod[t] = prod_{s <= t} (1 - betas[s])`` in float64. The model side
    reads the float32 copies through :meth:`coefficients`.
    """

    betas: np.ndarray
    alphas_cumprod: np.ndarray

    @classmethod
    def linear(cls, num_timesteps: int = NUM_TIMESTEPS, beta_start: float = BETA_START, beta_end: float = BETA_END):
        betas = np.linspace(beta_start, beta_end, num_timesteps, dtype=np.float64)
        return cls(betas=betas, alphas_cumprod=np.cumprod(1.0 - betas))

    @property
    def num_timesteps(self) -> int:
        return int(self.betas.shape[0])

    def check(self, t) -> None:
        t_arr = np.asarray(t)
        if t_arr.size and (t_arr.min() < 0 or t_arr.max() >= self.num_timesteps):
            raise TimestepOutOfRange(f"timestep outside [0, {self.num_timesteps})")

    def coefficients(self, t: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """``(sqrt(abar_t), sqrt(1 - abar_t))`` as float32 tensors shaped like ``t``."""
        ab = torch.as_tensor(self.alphas_cumprod, dtype=torch.float64)[t.long().cpu()]
        return ab.sqrt().float().to(t.device), (1.0 - ab).sqrt().float().to(t.device)


def forward_noise(x0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Closed-form marginal ``x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``.

    ``t`` is an int or a per-example tensor.
    """
    if eps.shape != x0.shape:
        raise ValueError("eps must match x0 in shape")
    sched.check(t)
    if isinstance(t, int) or (torch.is_tensor(t) and t.ndim == 0):
        t = torch.full((x0.shape[0],), int(t), dtype=torch.long)
    a, s = sched.coefficients(t)
    shape = (-1,) + (1,) * (x0.ndim - 1)
    return a.view(shape).to(x0.dtype) * x0 + s.view(shape).to(x0.dtype) * eps


def ddim_timesteps(steps: int, num_timesteps: int = NUM_TIMESTEPS) -> np.ndarray:
    """Evenly strided subset of size ``steps``, descending, always ending at 0."""
    if not 1 <= steps <= num_timesteps:
        raise InvalidSteps(f"steps must lie in [1, {num_timesteps}], got {steps}")
    stride = num_timesteps // steps
    return (np.arange(steps) * stride)[::-1].copy()


@torch.no_grad()
def ddim_sample(eps_fn, shape, sched: NoiseSchedule, steps: int, generator: torch.Generator) -> torch.Tensor:
    """Deterministic DDIM (eta = 0) from Gaussian noise drawn with ``generator``.

    ``eps_fn(x_t, t)`` returns the predicted noise. Output is in the model's
    [-1, 1] data range and is not clamped.
    """
    ts = ddim_timesteps(steps, sched.num_timesteps)
    x = torch.randn(shape, generator=generator)
    abar = torch.as_tensor(sched.alphas_cumprod, dtype=torch.float64)
    for i, t in enumerate(ts):
        t_batch = torch.full((shape[0],), int(t), dtype=torch.long)
        eps = eps_fn(x, t_batch)
        a_t = abar[t].item()
        a_prev = abar[ts[i + 1]].item() if i + 1 < len(ts) else 1.0
        x0 = (x - (1 - a_t) ** 0.5 * eps) / a_t**0.5
        x0 = x0.clamp(-1.0, 1.0)
        x = a_prev**0.5 * x0 + (1 - a_prev) ** 0.5 * eps
        if not torch.isfinite(x).all():
            raise FloatingPointError(f"non-finite sample at step {i} (t={t})")
    return x
