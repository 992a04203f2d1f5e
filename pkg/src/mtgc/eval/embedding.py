"""Image/caption cosine distance through a paired pair of frozen encoders."""

from __future__ import annotations

import torch

from mtgc.fusion import PAD_ID, TextEncoder, tokenize_with_placeholders
from mtgc.tascm import VisionBackbone, vision_embed

JOINT_DIM = 128
PROJECTION_SEED = 7


def cosine_distance(v_i: torch.Tensor, v_t: torch.Tensor, absolute: bool = True) -> float:
    """``1 - |<v_i, v_t>| / (|v_i| |v_t|)``; with ``absolute=False`` the signed form ``1 - cos``."""
    v_i = v_i.double().flatten()
    v_t = v_t.double().flatten()
    denom = torch.linalg.vector_norm(v_i) * torch.linalg.vector_norm(v_t)
    if denom == 0:
        raise ValueError("cosine distance is undefined for a zero vector")
    cos = torch.dot(v_i, v_t) / denom
    cos = cos.clamp(-1.0, 1.0)
    return float(1.0 - (cos.abs() if absolute else cos))


class CrossModalPair:
    """Backbone CLS and mean-pooled text features, each mapped by a fixed random projection."""

    def __init__(self, backbone: VisionBackbone, text_encoder: TextEncoder, dim: int = JOINT_DIM, seed: int = PROJECTION_SEED):
        self.backbone = backbone
        self.text_encoder = text_encoder
        gen = torch.Generator().manual_seed(seed)
        w_img = backbone.cfg.width
        w_txt = text_encoder.dim
        self.proj_image = torch.randn(w_img, dim, generator=gen, dtype=torch.float64) / w_img**0.5
        self.proj_text = torch.randn(w_txt, dim, generator=gen, dtype=torch.float64) / w_txt**0.5

    @torch.no_grad()
    def image_vector(self, image: torch.Tensor) -> torch.Tensor:
        cls = vision_embed(self.backbone, image).cls[0]
        return cls.double() @ self.proj_image

    @torch.no_grad()
    def text_vector(self, caption: str) -> torch.Tensor:
        tok = tokenize_with_placeholders(caption, 0, self.text_encoder.seq_len)
        ids = tok.ids_tensor()[None]
        mask = ids != PAD_ID
        emb = self.text_encoder.token_embedding(ids) + self.text_encoder.position_table
        out = self.text_encoder(emb, mask)[0]
        if mask.any():
            pooled = out[mask[0]].mean(dim=0)
        else:
            pooled = out.mean(dim=0)
        return pooled.double() @ self.proj_text


def embedding_distance(image: torch.Tensor, caption: str, pair: CrossModalPair, absolute: bool = True) -> float:
    return cosine_distance(pair.image_vector(image), pair.text_vector(caption), absolute=absolute)
