"""Full-reference fidelity metrics on [0, 1] images of shape (C, H, W)."""

from __future__ import annotations

import math
import warnings
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

PSNR_CAP_DB = 100.0
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
WINDOW_SIZE = 11
WINDOW_SIGMA = 1.5
MIN_SIDE_FULL_SCALES = 160
K1, K2 = 0.01, 0.03


def _as_array(x) -> np.ndarray:
    arr = x.detach().cpu().numpy() if torch.is_tensor(x) else np.asarray(x)
    arr = arr.astype(np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    return arr


def psnr(x, y) -> float:
    """``10 log10(1 / MSE)`` in dB; identical inputs give :data:`PSNR_CAP_DB`."""
    a, b = _as_array(x), _as_array(y)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP_DB)


def gaussian_window(size: int, sigma: float = WINDOW_SIGMA) -> np.ndarray:
    coords = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(coords**2) / (2 * sigma**2))
    return g / g.sum()


def num_scales(min_side: int) -> int:
    """Five scales from 160 px up; fewer below, each halving must keep >= 11 px."""
    if min_side >= MIN_SIDE_FULL_SCALES:
        return len(MS_SSIM_WEIGHTS)
    n = 1
    while n < len(MS_SSIM_WEIGHTS) and min_side // 2**n >= WINDOW_SIZE:
        n += 1
    return n


def _filter(x: torch.Tensor, win: torch.Tensor) -> torch.Tensor:
    c = x.shape[1]
    k = win.numel()
    x = F.conv2d(x, win.view(1, 1, 1, k).expand(c, 1, 1, k), groups=c)
    return F.conv2d(x, win.view(1, 1, k, 1).expand(c, 1, k, 1), groups=c)


def _ssim_cs(x: torch.Tensor, y: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    side = min(x.shape[-2:])
    size = min(WINDOW_SIZE, side if side % 2 else side - 1)
    win = torch.from_numpy(gaussian_window(size))
    c1, c2 = K1**2, K2**2
    mu_x, mu_y = _filter(x, win), _filter(y, win)
    sxx = _filter(x * x, win) - mu_x**2
    syy = _filter(y * y, win) - mu_y**2
    sxy = _filter(x * y, win) - mu_x * mu_y
    cs_map = (2 * sxy + c2) / (sxx + syy + c2)
    ssim_map = ((2 * mu_x * mu_y + c1) / (mu_x**2 + mu_y**2 + c1)) * cs_map
    return ssim_map.mean(dim=(-2, -1)), cs_map.mean(dim=(-2, -1))


def ms_ssim(x, y, scales: int | None = None) -> float:
    """Multi-scale SSIM with the standard five weights (renormalised when fewer scales run)."""
    a, b = _as_array(x), _as_array(y)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    side = min(a.shape[-2:])
    n = scales or num_scales(side)
    if n < len(MS_SSIM_WEIGHTS) and scales is None:
        warnings.warn(f"image side {side} < {MIN_SIDE_FULL_SCALES}: using {n} MS-SSIM scales", stacklevel=2)
    weights = torch.tensor(MS_SSIM_WEIGHTS[:n], dtype=torch.float64)
    weights = weights / weights.sum()
    xt, yt = torch.from_numpy(a)[None], torch.from_numpy(b)[None]
    factors = []
    for level in range(n):
        ssim_val, cs = _ssim_cs(xt, yt)
        if level < n - 1:
            factors.append(torch.relu(cs))
            xt = F.avg_pool2d(xt, 2, ceil_mode=False)
            yt = F.avg_pool2d(yt, 2, ceil_mode=False)
        else:
            factors.append(torch.relu(ssim_val))
    stacked = torch.stack(factors, dim=0)  # [n, 1, C]
    value = torch.prod(stacked ** weights.view(-1, 1, 1), dim=0).mean()
    return float(min(max(value.item(), 0.0), 1.0))


METRICS: dict[str, Callable] = {"psnr": psnr, "ms_ssim": ms_ssim}


def register_metric(name: str, fn: Callable) -> None:
    """Plug in an external full-reference scorer ``fn(x, y) -> float``."""
    METRICS[name] = fn
