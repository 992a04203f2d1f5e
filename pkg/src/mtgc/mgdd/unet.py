"""Small text-conditioned denoising U-Net and its ControlNet-style adapter."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

from mtgc.layers import MultiHeadAttention, group_norm, timestep_embedding, zero_module


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 3
    base_channels: int = 32
    mid_channels: int = 64
    cond_dim: int = 256
    num_heads: int = 4
    time_dim: int = 128

    def to_dict(self) -> dict:
        return asdict(self)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, time_dim: int):
        super().__init__()
        self.norm1 = group_norm(cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.time = nn.Linear(time_dim, cout)
        self.norm2 = group_norm(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class CrossAttnBlock(nn.Module):
    """Image features are the queries; the conditioning sequence provides keys and values."""

    def __init__(self, channels: int, cond_dim: int, num_heads: int):
        super().__init__()
        self.norm = group_norm(channels)
        self.ln = nn.LayerNorm(channels)
        self.attn = MultiHeadAttention(channels, num_heads, kv_dim=cond_dim)

    def forward(self, x: torch.Tensor, cond: torch.Tensor, cond_mask: torch.Tensor | None) -> torch.Tensor:
        b, c, h, w = x.shape
        tokens = self.norm(x).flatten(2).transpose(1, 2)
        out = self.attn(self.ln(tokens), context=cond, key_mask=cond_mask)
        return x + out.transpose(1, 2).reshape(b, c, h, w)


class Encoder(nn.Module):
    """conv_in + three down levels + middle block.

    Shared by the main U-Net and the adapter, which is a trainable copy of it.
    Returns the three skip tensors and the middle output.
    """

    def __init__(self, cfg: UNetConfig):
        super().__init__()
        c0, c1 = cfg.base_channels, cfg.mid_channels
        self.conv_in = nn.Conv2d(cfg.in_channels, c0, 3, padding=1)
        self.res0 = ResBlock(c0, c0, cfg.time_dim)
        self.down0 = nn.Conv2d(c0, c0, 3, stride=2, padding=1)
        self.res1 = ResBlock(c0, c1, cfg.time_dim)
        self.attn1 = CrossAttnBlock(c1, cfg.cond_dim, cfg.num_heads)
        self.down1 = nn.Conv2d(c1, c1, 3, stride=2, padding=1)
        self.res2 = ResBlock(c1, c1, cfg.time_dim)
        self.attn2 = CrossAttnBlock(c1, cfg.cond_dim, cfg.num_heads)
        self.mid_res1 = ResBlock(c1, c1, cfg.time_dim)
        self.mid_attn = CrossAttnBlock(c1, cfg.cond_dim, cfg.num_heads)
        self.mid_res2 = ResBlock(c1, c1, cfg.time_dim)

    def forward(self, x, temb, cond, cond_mask, hint=None):
        h = self.conv_in(x)
        if hint is not None:
            h = h + hint
        s0 = self.res0(h, temb)
        h = self.down0(s0)
        s1 = self.attn1(self.res1(h, temb), cond, cond_mask)
        h = self.down1(s1)
        s2 = self.attn2(self.res2(h, temb), cond, cond_mask)
        m = self.mid_res1(s2, temb)
        m = self.mid_attn(m, cond, cond_mask)
        m = self.mid_res2(m, temb)
        return [s0, s1, s2], m


class UNet(nn.Module):
    def __init__(self, cfg: UNetConfig | None = None):
        super().__init__()
        self.cfg = cfg or UNetConfig()
        c0, c1 = self.cfg.base_channels, self.cfg.mid_channels
        td = self.cfg.time_dim
        self.time_mlp = nn.Sequential(nn.Linear(td, td), nn.SiLU(), nn.Linear(td, td))
        self.encoder = Encoder(self.cfg)
        self.up_res2 = ResBlock(c1 + c1, c1, td)
        self.up_attn2 = CrossAttnBlock(c1, self.cfg.cond_dim, self.cfg.num_heads)
        self.up2 = nn.Conv2d(c1, c1, 3, padding=1)
        self.up_res1 = ResBlock(c1 + c1, c1, td)
        self.up_attn1 = CrossAttnBlock(c1, self.cfg.cond_dim, self.cfg.num_heads)
        self.up1 = nn.Conv2d(c1, c1, 3, padding=1)
        self.up_res0 = ResBlock(c1 + c0, c0, td)
        self.norm_out = group_norm(c0)
        self.conv_out = nn.Conv2d(c0, self.cfg.in_channels, 3, padding=1)

    def time_embed(self, t: torch.Tensor) -> torch.Tensor:
        return self.time_mlp(timestep_embedding(t, self.cfg.time_dim))

    def forward(self, x, t, cond, cond_mask=None, residuals=None):
        """Predict the noise in ``x``.

        ``residuals`` is ``([r0, r1, r2], r_mid)`` from the adapter; each tensor is
        added to the matching skip connection / middle output.
        """
        temb = self.time_embed(t)
        skips, m = self.encoder(x, temb, cond, cond_mask)
        if residuals is not None:
            down_res, mid_res = residuals
            skips = [s + r for s, r in zip(skips, down_res)]
            m = m + mid_res
        s0, s1, s2 = skips
        h = self.up_res2(torch.cat([m, s2], 1), temb)
        h = self.up_attn2(h, cond, cond_mask)
        h = self.up2(F.interpolate(h, scale_factor=2.0, mode="nearest"))
        h = self.up_res1(torch.cat([h, s1], 1), temb)
        h = self.up_attn1(h, cond, cond_mask)
        h = self.up1(F.interpolate(h, scale_factor=2.0, mode="nearest"))
        h = self.up_res0(torch.cat([h, s0], 1), temb)
        return self.conv_out(F.silu(self.norm_out(h)))


class ControlAdapter(nn.Module):
    """Trainable copy of the U-Net encoder driven by a control image.

    The hint encoder's last conv and every output projection start at exactly
    zero, so a fresh adapter contributes nothing to the main network.
    """

    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.cfg = cfg
        c0, c1 = cfg.base_channels, cfg.mid_channels
        self.time_mlp = nn.Sequential(nn.Linear(cfg.time_dim, cfg.time_dim), nn.SiLU(), nn.Linear(cfg.time_dim, cfg.time_dim))
        self.hint = nn.Sequential(
            nn.Conv2d(3, 16, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(16, 16, 3, padding=1),
            nn.SiLU(),
            zero_module(nn.Conv2d(16, c0, 3, padding=1)),
        )
        self.encoder = Encoder(cfg)
        self.zero_convs = nn.ModuleList([zero_module(nn.Conv2d(c, c, 1)) for c in (c0, c1, c1)])
        self.zero_mid = zero_module(nn.Conv2d(c1, c1, 1))

    @classmethod
    def from_unet(cls, unet: UNet) -> "ControlAdapter":
        adapter = cls(unet.cfg)
        adapter.encoder.load_state_dict(unet.encoder.state_dict())
        adapter.time_mlp.load_state_dict(unet.time_mlp.state_dict())
        return adapter

    def forward(self, x, t, cond, cond_mask, control):
        temb = self.time_mlp(timestep_embedding(t, self.cfg.time_dim))
        skips, m = self.encoder(x, temb, cond, cond_mask, hint=self.hint(control))
        return [zc(s) for zc, s in zip(self.zero_convs, skips)], self.zero_mid(m)
