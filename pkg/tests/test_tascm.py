from __future__ import annotations

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from mtgc.errors import BackboneNotLoaded, CorruptSpwPayload, DimensionMismatch
from mtgc.layers import frozen, masked_attention
from mtgc.tascm import (
    Cman,
    CmanConfig,
    SemEnc,
    SemEncConfig,
    SpwSequence,
    Tascm,
    VisionBackbone,
    VisualEmbeddingSequence,
    VitConfig,
    cman_map,
    pretrain_backbone,
    semenc_refine,
    spw_payload,
    spw_restore,
    vision_embed,
)
from mtgc.training import state_checksum
from oracles import softmax_scalar

VIT = VitConfig(image_size=64, patch_size=8, width=32, depth=1, num_heads=4)
SEMENC = SemEncConfig(num_layers=2, num_heads=4, head_dim=8, hidden_dim=64)


@pytest.fixture
def backbone():
    torch.manual_seed(0)
    bb = frozen(VisionBackbone(VIT))
    bb.loaded = True
    return bb


def test_token_count(backbone):
    z = vision_embed(backbone, torch.rand(2, 3, 64, 64))
    assert z.tokens.shape == (2, 65, 32)
    assert VIT.num_tokens == 65
    assert z.cls_index == 0


def test_backbone_must_be_loaded():
    with pytest.raises(BackboneNotLoaded):
        vision_embed(VisionBackbone(VIT), torch.rand(1, 3, 64, 64))
    with pytest.raises(BackboneNotLoaded):
        vision_embed(None, torch.rand(1, 3, 64, 64))


def test_embedding_is_deterministic_and_gradient_free(backbone):
    x = torch.rand(1, 3, 64, 64, requires_grad=True)
    a = vision_embed(backbone, x)
    b = vision_embed(backbone, x.detach().clone())
    assert torch.equal(a.tokens, b.tokens)
    assert not a.tokens.requires_grad
    assert all(not p.requires_grad for p in backbone.parameters())


def test_semenc_rejects_bad_width():
    with pytest.raises(DimensionMismatch):
        SemEnc(30, SEMENC)
    semenc = SemEnc(32, SEMENC)
    with pytest.raises(DimensionMismatch):
        semenc_refine(semenc, VisualEmbeddingSequence(torch.zeros(1, 3, 16)))


def test_default_semenc_config():
    cfg = SemEncConfig()
    assert (cfg.num_layers, cfg.num_heads) == (2, 16)
    assert cfg.num_heads * cfg.head_dim == VitConfig().width


def test_single_token_attention_is_identity():
    q = torch.randn(1, 1, 1, 8)
    out, w = masked_attention(q, q, torch.randn(1, 1, 1, 8), return_weights=True)
    assert torch.equal(w, torch.ones(1, 1, 1, 1))


def test_single_token_semenc_is_feed_forward_path():
    torch.manual_seed(1)
    semenc = SemEnc(32, SemEncConfig(num_layers=1, num_heads=4, head_dim=8, hidden_dim=64))
    x = torch.randn(1, 1, 32)
    block = semenc.blocks[0]
    attn = block.attn
    v = attn.to_v(block.norm1(x))
    expected = x + attn.to_out(v)
    expected = expected + block.ff(block.norm2(expected))
    out = semenc(x)
    assert torch.allclose(out, expected[:, 0], atol=1e-6)


def test_equal_keys_give_uniform_weights():
    q = torch.randn(1, 1, 3, 4)
    k = torch.ones(1, 1, 5, 4)
    _, w = masked_attention(q, k, torch.randn(1, 1, 5, 4), return_weights=True)
    assert torch.allclose(w, torch.full_like(w, 1 / 5), atol=1e-7)


def test_two_token_attention_matches_scalar_softmax():
    q = torch.tensor([[[[0.3, -1.2], [0.7, 0.4]]]], dtype=torch.float64)
    k = torch.tensor([[[[1.5, 0.2], [-0.4, 0.9]]]], dtype=torch.float64)
    v = torch.tensor([[[[1.0, 2.0], [3.0, -1.0]]]], dtype=torch.float64)
    out, w = masked_attention(q, k, v, return_weights=True)
    for i in range(2):
        scores = [sum(q[0, 0, i, d].item() * k[0, 0, j, d].item() for d in range(2)) / 2**0.5 for j in range(2)]
        ref = softmax_scalar(scores)
        assert w[0, 0, i].tolist() == pytest.approx(ref, abs=1e-6)
        for d in range(2):
            assert out[0, 0, i, d].item() == pytest.approx(sum(ref[j] * v[0, 0, j, d].item() for j in range(2)), abs=1e-6)


@given(st.integers(1, 4), st.integers(1, 9), st.integers(0, 2**31 - 1))
def test_attention_rows_sum_to_one(batch, tokens, seed):
    torch.manual_seed(seed)
    semenc = SemEnc(32, SEMENC)
    for block in semenc.blocks:
        block.attn.keep_weights = True
    semenc(torch.randn(batch, tokens, 32) * 3)
    for block in semenc.blocks:
        w = block.attn.last_weights
        assert torch.allclose(w.sum(-1), torch.ones_like(w.sum(-1)), atol=1e-5)


def test_cman_shape_and_zero_map():
    cman = Cman(32, CmanConfig(num_spw=2, text_dim=24))
    assert cman_map(cman, torch.randn(32)).vectors.shape == (2, 24)
    for layer in cman.net:
        if isinstance(layer, torch.nn.Linear):
            torch.nn.init.zeros_(layer.bias)
    assert torch.equal(cman(torch.zeros(32)), torch.zeros(2, 24))


def test_default_cman_config():
    cfg = CmanConfig()
    assert (cfg.num_spw, cfg.text_dim) == (1, 256)
    assert Cman(128).net[0].out_features == 256


def test_full_chain_shape(backbone):
    tascm = Tascm(backbone, SEMENC, CmanConfig(num_spw=3, text_dim=16))
    assert tascm(torch.rand(2, 3, 64, 64)).shape == (2, 3, 16)
    assert tascm(torch.rand(1, 3, 128, 96)).shape == (1, 3, 16)


def test_trainability_partition(backbone):
    tascm = Tascm(backbone, SEMENC)
    sem = {id(p) for p in tascm.semenc_params()}
    cm = {id(p) for p in tascm.cman_params()}
    every = {id(p) for p in tascm.parameters()}
    assert sem and cm and not (sem & cm)
    assert every == sem | cm
    assert not every & {id(p) for p in backbone.parameters()}


def test_backbone_checksum_survives_training(backbone):
    tascm = Tascm(backbone, SEMENC, CmanConfig(text_dim=16))
    before = state_checksum(backbone)
    opt = torch.optim.Adam(tascm.parameters(), lr=1e-2)
    for _ in range(3):
        loss = tascm(torch.rand(2, 3, 64, 64)).pow(2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
    assert state_checksum(backbone) == before
    assert all(p.grad is None for p in backbone.parameters())


def test_spw_payload_roundtrip_is_exact_after_fp16():
    v = torch.randn(2, 64) * 5
    restored = spw_restore(spw_payload(SpwSequence(v)))
    assert torch.equal(restored.vectors, v.half().float())
    assert (restored.L, restored.D_text) == (2, 64)


@given(st.integers(0, 2**31 - 1))
def test_fp16_error_bound(seed):
    v = torch.randn(1, 128, generator=torch.Generator().manual_seed(seed), dtype=torch.float64) * 4
    back = spw_restore(spw_payload(v.float())).vectors.double()
    bound = 2.0**-10 * v.abs() + 2.0**-24
    assert torch.all((back - v).abs() <= bound)


def test_spw_payload_layout():
    import zstandard

    raw = zstandard.ZstdDecompressor().decompress(spw_payload(torch.ones(1, 4)))
    assert raw[:4] == (1).to_bytes(2, "little") + (4).to_bytes(2, "little")
    assert np.array_equal(np.frombuffer(raw[4:], dtype="<f2"), np.ones(4, dtype=np.float16))


@pytest.mark.parametrize("cut", [1, 5, 20])
def test_truncated_spw_payload(cut):
    payload = spw_payload(torch.randn(1, 32))
    with pytest.raises(CorruptSpwPayload):
        spw_restore(payload[:-cut])


def test_spw_sequence_invariants():
    with pytest.raises(ValueError):
        SpwSequence(torch.zeros(0, 4))
    with pytest.raises(ValueError):
        SpwSequence(torch.tensor([[float("inf")]]))


def test_spw_bits_at_full_scale():
    payload = spw_payload(torch.randn(1, 1024))
    raw_bpp = 16 * 1024 / 1024**2
    assert raw_bpp <= 0.0157
    assert 0.013 <= 8 * len(payload) / 1024**2 <= raw_bpp + 0.0001


def test_pretrain_backbone_freezes_and_learns():
    imgs = torch.rand(16, 3, 64, 64)
    logs = []
    bb = pretrain_backbone(lambda g, b: imgs[torch.randint(0, 16, (b,), generator=g)], VIT, steps=30, batch_size=4, log=lambda s, v: logs.append(v))
    assert bb.loaded and all(not p.requires_grad for p in bb.parameters())
    assert logs[-1] < logs[0]
