"""Frozen ViT backbone, CLS refinement (SemEnc) and the alignment MLP producing pseudo-words."""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass

import numpy as np
import torch
import zstandard
from torch import nn

from mtgc.errors import BackboneNotLoaded, CorruptSpwPayload, DimensionMismatch
from mtgc.layers import TransformerBlock, frozen, interpolate_bilinear

SPW_HEADER = struct.Struct("<HH")
ZSTD_LEVEL = 19


@dataclass(frozen=True)
class VitConfig:
    image_size: int = 64
    patch_size: int = 8
    width: int = 128
    depth: int = 4
    num_heads: int = 4

    @property
    def num_tokens(self) -> int:
        return 1 + (self.image_size // self.patch_size) ** 2

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SemEncConfig:
    num_layers: int = 2
    num_heads: int = 16
    head_dim: int = 8
    hidden_dim: int = 512

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class CmanConfig:
    num_spw: int = 1
    text_dim: int = 256
    hidden_dim: int | None = None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class VisualEmbeddingSequence:
    tokens: torch.Tensor  # [B, N, D]
    cls_index: int = 0

    def __post_init__(self):
        if self.tokens.shape[-2] < 1:
            raise ValueError("embedding sequence is empty")

    @property
    def cls(self) -> torch.Tensor:
        return self.tokens[..., self.cls_index, :]


@dataclass
class SpwSequence:
    vectors: torch.Tensor  # [L, D_text] (or [B, L, D_text] during training)

    def __post_init__(self):
        if self.vectors.shape[-2] < 1:
            raise ValueError("an SPW sequence holds at least one vector")
        if not torch.isfinite(self.vectors).all():
            raise ValueError("SPW vectors must be finite")

    @property
    def L(self) -> int:
        return self.vectors.shape[-2]

    @property
    def D_text(self) -> int:
        return self.vectors.shape[-1]


class VisionBackbone(nn.Module):
    """Patch-embedding ViT with a learned CLS token and learned positions."""

    def __init__(self, cfg: VitConfig | None = None):
        super().__init__()
        self.cfg = cfg or VitConfig()
        c = self.cfg
        self.patch = nn.Conv2d(3, c.width, c.patch_size, stride=c.patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, c.width))
        self.pos = nn.Parameter(0.02 * torch.randn(1, c.num_tokens, c.width))
        self.blocks = nn.ModuleList([TransformerBlock(c.width, c.num_heads) for _ in range(c.depth)])
        self.norm = nn.LayerNorm(c.width)
        self.loaded = False

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        x = interpolate_bilinear(images.float(), self.cfg.image_size) * 2.0 - 1.0
        x = self.patch(x).flatten(2).transpose(1, 2)
        x = torch.cat([self.cls_token.expand(x.shape[0], -1, -1), x], dim=1) + self.pos
        for block in self.blocks:
            x = block(x)
        return self.norm(x)


class ReconstructionProxy(nn.Module):
    """Self-supervised heads used only to pretrain the backbone before freezing it.

    The CLS token predicts a coarse thumbnail of the whole image; each patch
    token reconstructs its own pixels.
    """

    def __init__(self, cfg: VitConfig, thumb: int = 8):
        super().__init__()
        self.thumb = thumb
        self.cfg = cfg
        self.global_head = nn.Linear(cfg.width, 3 * thumb * thumb)
        self.patch_head = nn.Linear(cfg.width, 3 * cfg.patch_size**2)

    def loss(self, backbone: VisionBackbone, images: torch.Tensor) -> torch.Tensor:
        tokens = backbone(images)
        x = interpolate_bilinear(images.float(), self.cfg.image_size)
        thumb = interpolate_bilinear(x, self.thumb).flatten(1)
        p = self.cfg.patch_size
        patches = nn.functional.unfold(x, p, stride=p).transpose(1, 2)
        loss_global = torch.mean((self.global_head(tokens[:, 0]) - thumb) ** 2)
        loss_local = torch.mean((self.patch_head(tokens[:, 1:]) - patches) ** 2)
        return loss_global + loss_local


def vision_embed(backbone: VisionBackbone | None, images: torch.Tensor) -> VisualEmbeddingSequence:
    """Frozen forward: never builds a graph through the backbone."""
    if backbone is None or not backbone.loaded:
        raise BackboneNotLoaded("vision backbone weights have not been loaded")
    if images.ndim == 3:
        images = images[None]
    with torch.no_grad():
        tokens = backbone(images)
    return VisualEmbeddingSequence(tokens)


class SemEnc(nn.Module):
    """``num_layers`` pre-norm self-attention blocks; returns the refined CLS row."""

    def __init__(self, width: int, cfg: SemEncConfig | None = None):
        super().__init__()
        self.cfg = cfg or SemEncConfig()
        if self.cfg.num_heads * self.cfg.head_dim != width:
            raise DimensionMismatch(
                f"num_heads * head_dim = {self.cfg.num_heads * self.cfg.head_dim} but model width is {width}"
            )
        self.blocks = nn.ModuleList(
            [TransformerBlock(width, self.cfg.num_heads, self.cfg.hidden_dim) for _ in range(self.cfg.num_layers)]
        )

    def forward(self, z: VisualEmbeddingSequence | torch.Tensor) -> torch.Tensor:
        seq = z.tokens if isinstance(z, VisualEmbeddingSequence) else z
        cls_index = z.cls_index if isinstance(z, VisualEmbeddingSequence) else 0
        for block in self.blocks:
            seq = block(seq)
        return seq[..., cls_index, :]


def semenc_refine(semenc: SemEnc, z: VisualEmbeddingSequence) -> torch.Tensor:
    width = z.tokens.shape[-1]
    if semenc.cfg.num_heads * semenc.cfg.head_dim != width:
        raise DimensionMismatch(f"SemEnc expects width {semenc.cfg.num_heads * semenc.cfg.head_dim}, got {width}")
    return semenc(z)


class Cman(nn.Module):
    """Two-layer GELU MLP from the CLS width to ``num_spw x text_dim``."""

    def __init__(self, width: int, cfg: CmanConfig | None = None):
        super().__init__()
        self.cfg = cfg or CmanConfig()
        hidden = self.cfg.hidden_dim or 2 * width
        self.net = nn.Sequential(
            nn.Linear(width, hidden),
            nn.GELU(),
            nn.Linear(hidden, self.cfg.num_spw * self.cfg.text_dim),
        )

    def forward(self, cls: torch.Tensor) -> torch.Tensor:
        out = self.net(cls)
        return out.reshape(*cls.shape[:-1], self.cfg.num_spw, self.cfg.text_dim)


def cman_map(cman: Cman, cls: torch.Tensor) -> SpwSequence:
    return SpwSequence(cman(cls))


class Tascm(nn.Module):
    """Frozen backbone plus the two trainable heads.

    ``semenc`` and ``cman`` hold every trainable parameter; the backbone is kept
    outside the parameter tree so an optimizer built from ``parameters()``
    can never touch it.
    """

    def __init__(self, backbone: VisionBackbone, semenc_cfg: SemEncConfig | None = None, cman_cfg: CmanConfig | None = None):
        super().__init__()
        width = backbone.cfg.width
        self.semenc = SemEnc(width, semenc_cfg)
        self.cman = Cman(width, cman_cfg)
        object.__setattr__(self, "backbone", backbone)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """``[B, 3, H, W]`` images -> ``[B, L, D_text]`` pseudo-words."""
        z = vision_embed(self.backbone, images)
        return self.cman(self.semenc(z))

    def semenc_params(self) -> list[nn.Parameter]:
        return list(self.semenc.parameters())

    def cman_params(self) -> list[nn.Parameter]:
        return list(self.cman.parameters())


def spw_payload(spws: SpwSequence | torch.Tensor, level: int = ZSTD_LEVEL) -> bytes:
    """Zstandard frame over ``[u16 L][u16 D][fp16 x L*D]`` (little-endian)."""
    vec = spws.vectors if isinstance(spws, SpwSequence) else spws
    vec = vec.detach().cpu()
    if vec.ndim != 2:
        raise ValueError("spw_payload expects a single [L, D] sequence")
    if not torch.isfinite(vec).all():
        raise ValueError("SPW vectors must be finite")
    half = vec.to(torch.float16).numpy().astype("<f2")
    raw = SPW_HEADER.pack(*half.shape) + half.tobytes()
    cctx = zstandard.ZstdCompressor(level=level, write_checksum=True, write_content_size=True)
    return cctx.compress(raw)


def spw_restore(payload: bytes) -> SpwSequence:
    """Inverse of :func:`spw_payload`; values come back as float32 copies of the fp16 data."""
    try:
        raw = zstandard.ZstdDecompressor().decompress(payload)
    except zstandard.ZstdError as exc:
        raise CorruptSpwPayload(str(exc)) from exc
    if len(raw) < SPW_HEADER.size:
        raise CorruptSpwPayload("SPW payload too short for its header")
    n, d = SPW_HEADER.unpack_from(raw)
    if len(raw) != SPW_HEADER.size + 2 * n * d or n < 1:
        raise CorruptSpwPayload(f"SPW payload size does not match header L={n}, D={d}")
    half = np.frombuffer(raw, dtype="<f2", offset=SPW_HEADER.size).reshape(n, d)
    return SpwSequence(torch.from_numpy(half.astype(np.float32)))


def pretrain_backbone(
    images_fn,
    cfg: VitConfig | None = None,
    steps: int = 600,
    batch_size: int = 32,
    lr: float = 1e-3,
    seed: int = 0,
    log=None,
) -> VisionBackbone:
    """Fit the backbone with the reconstruction proxy, then freeze it.

    ``images_fn(generator, batch_size)`` returns a ``[B, 3, H, W]`` batch.
    """
    torch.manual_seed(seed)
    cfg = cfg or VitConfig()
    backbone = VisionBackbone(cfg)
    proxy = ReconstructionProxy(cfg)
    gen = torch.Generator().manual_seed(seed)
    params = list(backbone.parameters()) + list(proxy.parameters())
    opt = torch.optim.Adam(params, lr=lr)
    for step in range(steps):
        loss = proxy.loss(backbone, images_fn(gen, batch_size))
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if log is not None and (step % 100 == 0 or step == steps - 1):
            log(step, loss.item())
    backbone = frozen(backbone)
    backbone.loaded = True
    return backbone
