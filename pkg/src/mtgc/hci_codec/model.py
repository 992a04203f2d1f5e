"""Strided-conv rate-distortion autoencoder with a fully factorized entropy model."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from mtgc.hci_codec.rangecoder import CdfTables, build_tables

LAMBDA_GRID = (1e-4, 2e-4, 3e-4)
PIXEL_SCALE = 255.0
LIKELIHOOD_BOUND = 1e-9


@dataclass(frozen=True)
class RdCodecConfig:
    """Codec hyper-parameters.

    The training objective is ``rate + lambda_rd * distortion`` with rate in bits per
    pixel and distortion the mean squared error on the 0-255 pixel scale.
    """

    lambda_rd: float = 2e-4
    latent_channels: int = 16
    hidden_channels: int = 48
    downsample_factor: int = 16
    entropy_model: str = "factorized"

    def __post_init__(self):
        if self.lambda_rd < 0:
            raise ValueError("lambda_rd must be non-negative")
        if self.downsample_factor not in (4, 8, 16):
            raise ValueError("downsample_factor must be 4, 8 or 16")
        if self.entropy_model != "factorized":
            raise ValueError("only the factorized entropy model is implemented")

    def to_dict(self) -> dict:
        return asdict(self)


class GDN(nn.Module):
    """Generalized divisive normalization (inverse=True gives the decoder's IGDN)."""

    def __init__(self, channels: int, inverse: bool = False):
        super().__init__()
        self.inverse = inverse
        self.beta = nn.Parameter(torch.full((channels,), math.log(math.e - 1)))
        self.gamma = nn.Parameter(0.1 * torch.eye(channels))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        beta = F.softplus(self.beta) + 1e-6
        gamma = F.relu(self.gamma)[:, :, None, None]
        norm = F.conv2d(x * x, gamma, beta)
        return x * torch.sqrt(norm) if self.inverse else x * torch.rsqrt(norm)


class FactorizedDensity(nn.Module):
    """Per-channel learned univariate density (cumulative modelled by a tiny monotone MLP)."""

    def __init__(self, channels: int, filters: tuple[int, ...] = (3, 3, 3), init_scale: float = 10.0):
        super().__init__()
        self.channels = channels
        dims = (1,) + tuple(filters) + (1,)
        scale = init_scale ** (1.0 / (len(filters) + 1))
        self.matrices = nn.ParameterList()
        self.biases = nn.ParameterList()
        self.factors = nn.ParameterList()
        gen = torch.Generator().manual_seed(1234)
        for i in range(len(filters) + 1):
            init = math.log(math.expm1(1.0 / scale / dims[i + 1]))
            self.matrices.append(nn.Parameter(torch.full((channels, dims[i + 1], dims[i]), init)))
            self.biases.append(nn.Parameter(torch.rand(channels, dims[i + 1], 1, generator=gen) - 0.5))
            if i < len(filters):
                self.factors.append(nn.Parameter(torch.zeros(channels, dims[i + 1], 1)))

    def logits_cumulative(self, x: torch.Tensor) -> torch.Tensor:
        """``x``: ``(C, 1, n)`` -> logit of the CDF at each point."""
        logits = x
        for i, matrix in enumerate(self.matrices):
            logits = torch.matmul(F.softplus(matrix), logits) + self.biases[i]
            if i < len(self.factors):
                logits = logits + torch.tanh(self.factors[i]) * torch.tanh(logits)
        return logits

    def likelihood(self, y: torch.Tensor) -> torch.Tensor:
        """Probability mass of the unit bin around each entry of ``y`` (B, C, H, W)."""
        b, c, h, w = y.shape
        v = y.permute(1, 0, 2, 3).reshape(c, 1, -1)
        lower = self.logits_cumulative(v - 0.5)
        upper = self.logits_cumulative(v + 0.5)
        sign = -torch.sign(lower + upper).detach()
        lik = torch.abs(torch.sigmoid(sign * upper) - torch.sigmoid(sign * lower))
        lik = lik.clamp_min(LIKELIHOOD_BOUND)
        return lik.reshape(c, b, h, w).permute(1, 0, 2, 3)

    @torch.no_grad()
    def build_tables(self, support: int = 64, tail: float = 1e-6) -> CdfTables:
        """Quantise the density over the integers in ``[-support, support]``."""
        grid = torch.arange(-support, support + 1, dtype=torch.float32)
        v = grid.expand(self.channels, 1, -1).contiguous()
        cdf_hi = torch.sigmoid(self.logits_cumulative(v + 0.5))[:, 0].double().numpy()
        cdf_lo = torch.sigmoid(self.logits_cumulative(v - 0.5))[:, 0].double().numpy()
        pmfs, offsets, escapes = [], [], []
        for c in range(self.channels):
            pmf = np.clip(cdf_hi[c] - cdf_lo[c], 0.0, None)
            keep = np.nonzero((cdf_hi[c] > tail) & (cdf_lo[c] < 1.0 - tail))[0]
            if keep.size == 0:
                keep = np.array([support])
            lo, hi = int(keep[0]), int(keep[-1])
            inside = pmf[lo : hi + 1]
            escape = max(1.0 - float(inside.sum()), 0.0)
            pmfs.append(inside)
            offsets.append(lo - support)
            escapes.append(escape)
        return build_tables(pmfs, offsets, escapes)


def _conv(cin: int, cout: int, stride: int) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, 5, stride=stride, padding=2)


def _deconv(cin: int, cout: int, stride: int) -> nn.Module:
    if stride == 1:
        return nn.Conv2d(cin, cout, 5, padding=2)
    return nn.ConvTranspose2d(cin, cout, 5, stride=stride, padding=2, output_padding=1)


class HciCodec(nn.Module):
    def __init__(self, cfg: RdCodecConfig | None = None):
        super().__init__()
        self.cfg = cfg or RdCodecConfig()
        n, m = self.cfg.hidden_channels, self.cfg.latent_channels
        n_strided = int(math.log2(self.cfg.downsample_factor))
        strides = [2 if i < n_strided else 1 for i in range(4)]
        self.encoder = nn.Sequential(
            _conv(3, n, strides[0]), GDN(n),
            _conv(n, n, strides[1]), GDN(n),
            _conv(n, n, strides[2]), GDN(n),
            _conv(n, m, strides[3]),
        )
        self.decoder = nn.Sequential(
            _deconv(m, n, strides[3]), GDN(n, inverse=True),
            _deconv(n, n, strides[2]), GDN(n, inverse=True),
            _deconv(n, n, strides[1]), GDN(n, inverse=True),
            _deconv(n, 3, strides[0]),
        )
        self.density = FactorizedDensity(m)
        self.tables: CdfTables | None = None

    def forward(self, x: torch.Tensor, noise: torch.Tensor | None = None):
        """Training forward: ``noise`` is the U(-1/2, 1/2) quantisation proxy."""
        y = self.encoder(x)
        y_tilde = y + noise if noise is not None else torch.round(y)
        x_hat = self.decoder(y_tilde)
        return x_hat, self.density.likelihood(y_tilde), y

    def update_tables(self) -> CdfTables:
        self.tables = self.density.build_tables()
        return self.tables
