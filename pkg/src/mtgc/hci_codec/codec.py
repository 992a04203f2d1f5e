"""Codec training, payload framing, encode/decode and the pixel-entropy measure."""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from mtgc import _accel
from mtgc.errors import CorruptHciBitstream, NonFiniteLoss, ShapeNotDivisible, UntrainedCodec
from mtgc.hci_codec import _kernels, rangecoder
from mtgc.hci_codec.model import PIXEL_SCALE, HciCodec, RdCodecConfig
from mtgc.hci_codec.rangecoder import CdfTables

HEADER = struct.Struct("<III")
CRC = struct.Struct("<I")

if _accel.HAVE_NUMBA:
    _histogram_nb = _accel.jit(_kernels.histogram_u8)
else:  # pragma: no cover
    _histogram_nb = None


@dataclass(frozen=True)
class LatentCode:
    values: np.ndarray  # int64 (C, h', w')
    likelihood_bits: float

    def __post_init__(self):
        if self.likelihood_bits < 0:
            raise ValueError("likelihood_bits must be non-negative")


@dataclass(frozen=True)
class HciResult:
    reconstruction: torch.Tensor
    bitstream: bytes
    height: int
    width: int

    @property
    def bpp(self) -> float:
        return 8 * len(self.bitstream) / (self.height * self.width)


def rd_terms(codec: HciCodec, batch: torch.Tensor, generator: torch.Generator | None = None):
    """Return ``(loss, rate_bpp, distortion)`` tensors for one batch.

    Rate uses the additive-uniform-noise proxy; distortion is MSE on the 0-255 scale.
    """
    y = codec.encoder(batch)
    noise = torch.rand(y.shape, generator=generator, dtype=y.dtype) - 0.5
    y_tilde = y + noise
    x_hat = codec.decoder(y_tilde)
    lik = codec.density.likelihood(y_tilde)
    n_pixels = batch.shape[0] * batch.shape[2] * batch.shape[3]
    rate = -torch.log2(lik).sum() / n_pixels
    distortion = torch.mean((x_hat - batch) ** 2) * PIXEL_SCALE**2
    return rate + codec.cfg.lambda_rd * distortion, rate, distortion


def rd_train_step(
    codec: HciCodec,
    batch: torch.Tensor,
    optimizer: torch.optim.Optimizer,
    generator: torch.Generator | None = None,
) -> tuple[float, float, float]:
    codec.train()
    optimizer.zero_grad(set_to_none=True)
    loss, rate, distortion = rd_terms(codec, batch, generator)
    if not torch.isfinite(loss):
        raise NonFiniteLoss(
            f"rate-distortion loss is {loss.item()} (rate={rate.item()}, distortion={distortion.item()})"
        )
    loss.backward()
    optimizer.step()
    codec.tables = None
    return loss.item(), rate.item(), distortion.item()


def random_crops(images: torch.Tensor, crop: int, batch_size: int, generator: torch.Generator) -> torch.Tensor:
    n, _, h, w = images.shape
    idx = torch.randint(0, n, (batch_size,), generator=generator)
    ys = torch.randint(0, h - crop + 1, (batch_size,), generator=generator)
    xs = torch.randint(0, w - crop + 1, (batch_size,), generator=generator)
    out = [images[i, :, y : y + crop, x : x + crop] for i, y, x in zip(idx.tolist(), ys.tolist(), xs.tolist())]
    flips = torch.rand(batch_size, generator=generator) < 0.5
    return torch.stack([o.flip(-1) if f else o for o, f in zip(out, flips.tolist())])


def train_codec(
    images: torch.Tensor,
    cfg: RdCodecConfig,
    steps: int = 2000,
    seed: int = 0,
    crop: int = 64,
    batch_size: int = 16,
    lr: float = 1e-3,
    log=None,
) -> tuple[HciCodec, list[tuple[float, float, float]]]:
    """Fit a codec to random crops of ``images`` (N, 3, H, W) in [0, 1]."""
    torch.manual_seed(seed)
    codec = HciCodec(cfg)
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(codec.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, milestones=[int(steps * 0.8)], gamma=0.1)
    history = []
    with _accel.flush_denormals():
        for step in range(steps):
            batch = random_crops(images, crop, batch_size, gen)
            history.append(rd_train_step(codec, batch, opt, gen))
            sched.step()
            if log is not None and (step % 200 == 0 or step == steps - 1):
                log(step, *history[-1])
    codec.eval()
    codec.update_tables()
    return codec, history


def _require_ready(codec: HciCodec) -> CdfTables:
    if codec.tables is None:
        raise UntrainedCodec("codec has no entropy-coding tables; train or load a checkpoint first")
    return codec.tables


def _as_batch(image: torch.Tensor) -> torch.Tensor:
    if image.ndim == 3:
        image = image[None]
    if image.ndim != 4 or image.shape[1] != 3:
        raise ValueError(f"expected a (3, H, W) image, got {tuple(image.shape)}")
    return image.float()


@torch.no_grad()
def hci_encode(codec: HciCodec, image: torch.Tensor) -> tuple[LatentCode, bytes]:
    tables = _require_ready(codec)
    x = _as_batch(image)
    f = codec.cfg.downsample_factor
    if x.shape[2] % f or x.shape[3] % f:
        raise ShapeNotDivisible(f"image {x.shape[2]}x{x.shape[3]} is not divisible by {f}")
    codec.eval()
    y = torch.round(codec.encoder(x))[0]
    values = y.to(torch.int64).numpy()
    body = rangecoder.encode(values, tables)
    head = HEADER.pack(values.shape[1], values.shape[2], len(body)) + body
    code = LatentCode(values=values, likelihood_bits=rangecoder.model_bits(values, tables))
    return code, head + CRC.pack(zlib.crc32(head))


def parse_payload(bitstream: bytes) -> tuple[int, int, bytes]:
    """Validate framing and checksum; return ``(latent_h, latent_w, range_coded_bytes)``."""
    if len(bitstream) < HEADER.size + CRC.size:
        raise CorruptHciBitstream("payload shorter than its fixed framing")
    h, w, n = HEADER.unpack_from(bitstream)
    if len(bitstream) != HEADER.size + n + CRC.size:
        raise CorruptHciBitstream("declared length does not match payload size")
    (crc,) = CRC.unpack_from(bitstream, HEADER.size + n)
    if zlib.crc32(bitstream[: HEADER.size + n]) != crc:
        raise CorruptHciBitstream("checksum mismatch")
    return h, w, bitstream[HEADER.size : HEADER.size + n]


def decode_latent(codec: HciCodec, bitstream: bytes) -> np.ndarray:
    tables = _require_ready(codec)
    h, w, body = parse_payload(bitstream)
    try:
        return rangecoder.decode(body, (tables.channels, h, w), tables)
    except ValueError as exc:
        raise CorruptHciBitstream(str(exc)) from exc


@torch.no_grad()
def hci_decode(codec: HciCodec, bitstream: bytes) -> torch.Tensor:
    """Reconstruction ``(3, H, W)`` clamped to [0, 1]."""
    values = decode_latent(codec, bitstream)
    codec.eval()
    y = torch.from_numpy(values).float()[None]
    return codec.decoder(y)[0].clamp(0.0, 1.0)


def hci_roundtrip(codec: HciCodec, image: torch.Tensor) -> HciResult:
    _, bitstream = hci_encode(codec, image)
    recon = hci_decode(codec, bitstream)
    return HciResult(recon, bitstream, image.shape[-2], image.shape[-1])


def save_codec(codec: HciCodec, path: str | Path, extra: dict | None = None) -> None:
    tables = _require_ready(codec)
    torch.save(
        {
            "config": codec.cfg.to_dict(),
            "state_dict": codec.state_dict(),
            "tables": {k: torch.from_numpy(v) for k, v in tables.to_arrays().items()},
            "extra": extra or {},
        },
        path,
    )


def load_codec(path: str | Path, expect: RdCodecConfig | None = None) -> HciCodec:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    cfg = RdCodecConfig(**blob["config"])
    if expect is not None and expect != cfg:
        raise ValueError(f"checkpoint config {cfg} does not match requested {expect}")
    codec = HciCodec(cfg)
    codec.load_state_dict(blob["state_dict"])
    codec.eval()
    t = blob["tables"]
    codec.tables = CdfTables.from_arrays(t["cdf"].numpy(), t["cdf_len"].numpy(), t["offset"].numpy())
    return codec


def to_levels(image) -> np.ndarray:
    """8-bit levels of a [0, 1] float image (or pass-through for uint8)."""
    arr = image.detach().cpu().numpy() if torch.is_tensor(image) else np.asarray(image)
    if arr.dtype == np.uint8:
        return arr
    return np.clip(np.rint(arr.astype(np.float64) * 255.0), 0, 255).astype(np.uint8)


def pixel_histogram(levels: np.ndarray) -> np.ndarray:
    flat = np.ascontiguousarray(levels, dtype=np.uint8).reshape(-1)
    if _accel.USE_NUMBA:
        return _histogram_nb(flat, np.zeros(256, dtype=np.int64))
    return np.bincount(flat, minlength=256).astype(np.int64)


def image_entropy(image) -> float:
    """Shannon entropy in bits of the pooled 256-bin pixel-value histogram."""
    counts = pixel_histogram(to_levels(image))
    total = counts.sum()
    if total == 0:
        return 0.0
    p = counts[counts > 0] / total
    h = -float(np.sum(p * np.log2(p)))
    return max(h, 0.0) if not math.isclose(h, 0.0, abs_tol=1e-15) else 0.0
