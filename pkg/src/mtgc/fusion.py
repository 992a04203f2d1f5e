"""Caption tokenization, placeholder splicing of pseudo-words, and the frozen text encoder."""

from __future__ import annotations

import string
import zlib
from dataclasses import dataclass

import torch
from torch import nn

from mtgc.errors import CaptionOverflow, SpwCountMismatch, TextEncoderNotLoaded
from mtgc.guidance_text import Caption
from mtgc.layers import TransformerBlock, frozen, sinusoidal_table

VOCAB_SIZE = 4096
PAD_ID = 0
PLACEHOLDER_ID = 1
FIRST_WORD_ID = 2
SEQ_LEN = 32
D_TEXT = 256
TEXT_ENCODER_SEED = 20240601


def word_id(word: str) -> int:
    """Stable hash bucket of a normalised word (never PAD or PLACEHOLDER)."""
    return FIRST_WORD_ID + zlib.crc32(word.encode("utf-8")) % (VOCAB_SIZE - FIRST_WORD_ID)


def tokenize(text: str) -> list[int]:
    """Lowercase, split on whitespace, strip surrounding punctuation, hash each word."""
    ids = []
    for raw in text.lower().split():
        word = raw.strip(string.punctuation) or raw
        ids.append(word_id(word))
    return ids


@dataclass(frozen=True)
class TokenizedCaption:
    token_ids: tuple[int, ...]
    placeholder_positions: tuple[int, ...]

    @property
    def seq_len(self) -> int:
        return len(self.token_ids)

    @property
    def num_placeholders(self) -> int:
        return len(self.placeholder_positions)

    def ids_tensor(self) -> torch.Tensor:
        return torch.tensor(self.token_ids, dtype=torch.long)

    def attention_mask(self) -> torch.Tensor:
        return self.ids_tensor() != PAD_ID

    def placeholder_mask(self) -> torch.Tensor:
        return self.ids_tensor() == PLACEHOLDER_ID


def tokenize_with_placeholders(caption: Caption | str, num_spw: int, seq_len: int = SEQ_LEN) -> TokenizedCaption:
    if num_spw < 0:
        raise ValueError("number of placeholders must be non-negative")
    text = caption.text if isinstance(caption, Caption) else caption
    ids = tokenize(text)
    if len(ids) + num_spw > seq_len:
        raise CaptionOverflow(f"{len(ids)} caption tokens + {num_spw} placeholders exceed sequence length {seq_len}")
    positions = tuple(range(len(ids), len(ids) + num_spw))
    ids = ids + [PLACEHOLDER_ID] * num_spw
    ids = ids + [PAD_ID] * (seq_len - len(ids))
    return TokenizedCaption(tuple(ids), positions)


def batch_tokens(toks: list[TokenizedCaption]) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack to ``(ids [B, S], placeholder_mask [B, S])``."""
    ids = torch.stack([t.ids_tensor() for t in toks])
    return ids, ids == PLACEHOLDER_ID


class TextEncoder(nn.Module):
    """Token embedding table, fixed sinusoidal positions and a small transformer stack."""

    def __init__(self, dim: int = D_TEXT, num_layers: int = 2, num_heads: int = 4, seq_len: int = SEQ_LEN, vocab_size: int = VOCAB_SIZE):
        super().__init__()
        self.dim = dim
        self.seq_len = seq_len
        self.token_embedding = nn.Embedding(vocab_size, dim)
        nn.init.normal_(self.token_embedding.weight, std=1.0)
        self.register_buffer("position_table", sinusoidal_table(seq_len, dim), persistent=False)
        self.blocks = nn.ModuleList([TransformerBlock(dim, num_heads) for _ in range(num_layers)])
        self.norm = nn.LayerNorm(dim)

    def forward(self, x: torch.Tensor, key_mask: torch.Tensor) -> torch.Tensor:
        for block in self.blocks:
            x = block(x, key_mask=key_mask)
        return self.norm(x)


def build_text_encoder(dim: int = D_TEXT, seed: int = TEXT_ENCODER_SEED, **kwargs) -> TextEncoder:
    """Randomly initialised from a fixed seed, then frozen."""
    saved_rng = torch.random.get_rng_state()
    torch.manual_seed(seed)
    enc = TextEncoder(dim=dim, **kwargs)
    torch.random.set_rng_state(saved_rng)
    return frozen(enc)


@dataclass
class FusedEmbedding:
    """``embeddings`` = ``pre_position`` + position table; both ``[B, S, D]``."""

    embeddings: torch.Tensor
    pre_position: torch.Tensor
    mask: torch.Tensor
    placeholder_mask: torch.Tensor

    @property
    def seq_len(self) -> int:
        return self.embeddings.shape[-2]


@dataclass
class ConditioningEmbedding:
    values: torch.Tensor  # [B, S, D]
    mask: torch.Tensor  # [B, S] bool, False at PAD


def _spw_tensor(spws) -> torch.Tensor:
    vec = torch.as_tensor(getattr(spws, "vectors", spws))
    return vec if vec.dtype == torch.float64 else vec.float()


def fuse_batch(ids: torch.Tensor, placeholder_mask: torch.Tensor, spws, encoder: TextEncoder) -> FusedEmbedding:
    """Batched splice: ``spws`` is ``[B, L, D]`` (``L`` may be 0)."""
    if encoder is None:
        raise TextEncoderNotLoaded("fusion needs the text encoder's embedding table")
    b, s = ids.shape
    emb = encoder.token_embedding(ids)
    counts = placeholder_mask.sum(dim=1)
    vectors = _spw_tensor(spws) if spws is not None else emb.new_zeros(b, 0, emb.shape[-1])
    if vectors.ndim == 2:
        vectors = vectors[None]
    if vectors.shape[0] != b or bool((counts != vectors.shape[1]).any()):
        raise SpwCountMismatch(f"{vectors.shape[1]} SPWs for placeholder counts {counts.tolist()}")
    if vectors.shape[-1] != emb.shape[-1]:
        raise SpwCountMismatch(f"SPW width {vectors.shape[-1]} differs from embedding width {emb.shape[-1]}")
    if vectors.shape[1]:
        rows, cols = placeholder_mask.nonzero(as_tuple=True)
        emb = emb.index_put((rows, cols), vectors.reshape(-1, emb.shape[-1]).to(emb.dtype))
    pe = encoder.position_table[:s].to(emb.dtype)
    return FusedEmbedding(emb + pe, emb, ids != PAD_ID, placeholder_mask)


def fuse(tok: TokenizedCaption, spws, encoder: TextEncoder) -> FusedEmbedding:
    """Single-caption splice; ``spws`` is ``[L, D]`` or an object with ``.vectors``."""
    vectors = _spw_tensor(spws) if spws is not None else None
    if vectors is not None and vectors.shape[0] != tok.num_placeholders:
        raise SpwCountMismatch(f"{vectors.shape[0]} SPWs for {tok.num_placeholders} placeholders")
    ids, ph = batch_tokens([tok])
    return fuse_batch(ids, ph, None if vectors is None else vectors[None], encoder)


def encode_condition(fe: FusedEmbedding, encoder: TextEncoder | None) -> ConditioningEmbedding:
    if encoder is None:
        raise TextEncoderNotLoaded("text encoder weights are not loaded")
    return ConditioningEmbedding(encoder(fe.embeddings, fe.mask), fe.mask)


def condition_from_captions(captions: list[str], spws, encoder: TextEncoder, num_spw: int) -> ConditioningEmbedding:
    """Tokenize, splice and encode a batch of caption strings."""
    toks = [tokenize_with_placeholders(c, num_spw, encoder.seq_len) for c in captions]
    ids, ph = batch_tokens(toks)
    return encode_condition(fuse_batch(ids, ph, spws, encoder), encoder)
