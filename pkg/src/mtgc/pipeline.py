"""End-to-end encoder and decoder built from the trained pieces."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from mtgc.container import ContainerMeta, GuidancePayloads, pack, unpack
from mtgc.errors import ShapeMismatch
from mtgc.fusion import condition_from_captions
from mtgc.guidance_text import Caption, compress_caption, decompress_caption
from mtgc.hci_codec.codec import hci_decode, hci_encode
from mtgc.hci_codec.model import HciCodec
from mtgc.layers import interpolate_bilinear
from mtgc.mgdd.decoder import sample
from mtgc.tascm import SpwSequence, spw_payload, spw_restore
from mtgc.training import MtgcModels


@dataclass
class Decoded:
    image: torch.Tensor  # [3, H, W] in [0, 1]
    caption: str
    spws: SpwSequence
    hci: torch.Tensor  # [3, H, W]


@torch.no_grad()
def compute_spws(models: MtgcModels, image: torch.Tensor) -> SpwSequence:
    return SpwSequence(models.tascm(image[None])[0])


def encode_image(image: torch.Tensor, caption: Caption | str, models: MtgcModels, codec: HciCodec, lambda_index: int) -> bytes:
    """Caption, pseudo-words and HCI for one ``[3, H, W]`` image, packed into a container."""
    h, w = image.shape[-2:]
    text = caption.text if isinstance(caption, Caption) else caption
    num_spw = models.cfg.num_spw
    spw_bytes = spw_payload(compute_spws(models, image)) if num_spw else b""
    _, hci_bytes = hci_encode(codec, image)
    meta = ContainerMeta(h, w, lambda_index, num_spw, models.cfg.text_dim)
    return pack(GuidancePayloads(compress_caption(text), spw_bytes, hci_bytes), meta)


def decode_container(data: bytes, models: MtgcModels, codec: HciCodec, steps: int = 50, seed: int = 0) -> Decoded:
    payloads, meta = unpack(data)
    if meta.L != models.cfg.num_spw or meta.D_text != models.cfg.text_dim:
        raise ShapeMismatch(f"container carries L={meta.L}, D={meta.D_text}; models expect {models.cfg.num_spw}, {models.cfg.text_dim}")
    caption = decompress_caption(payloads.caption).text
    spws = spw_restore(payloads.spw) if meta.L else None
    hci = hci_decode(codec, payloads.hci)
    if hci.shape[-2:] != (meta.image_h, meta.image_w):
        hci = interpolate_bilinear_hw(hci, meta.image_h, meta.image_w)
    vectors = spws.vectors[None] if spws is not None else None
    cond = condition_from_captions([caption], vectors, models.text_encoder, meta.L)
    low = sample(models.unet, models.adapter, cond, hci[None], steps, seed, models.cfg.resolution, models.sched)
    image = interpolate_bilinear_hw(low[0], meta.image_h, meta.image_w).clamp(0.0, 1.0)
    return Decoded(image, caption, spws, hci)


def interpolate_bilinear_hw(img: torch.Tensor, h: int, w: int) -> torch.Tensor:
    if img.shape[-2:] == (h, w):
        return img
    if h == w:
        return interpolate_bilinear(img[None], h)[0]
    return torch.nn.functional.interpolate(img[None], size=(h, w), mode="bilinear", align_corners=False)[0]
