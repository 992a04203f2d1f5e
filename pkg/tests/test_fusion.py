from __future__ import annotations

import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from mtgc.errors import CaptionOverflow, SpwCountMismatch, TextEncoderNotLoaded
from mtgc.fusion import (
    PAD_ID,
    PLACEHOLDER_ID,
    batch_tokens,
    build_text_encoder,
    condition_from_captions,
    encode_condition,
    fuse,
    fuse_batch,
    tokenize,
    tokenize_with_placeholders,
    word_id,
)
from mtgc.guidance_text import Caption
from mtgc.layers import sinusoidal_table

DIM = 32


@pytest.fixture(scope="module")
def encoder():
    return build_text_encoder(DIM, seq_len=16)


def test_tokenizer_normalises():
    assert tokenize("A Cat, sleeping.") == [word_id("a"), word_id("cat"), word_id("sleeping")]
    assert all(i > PLACEHOLDER_ID for i in tokenize("any words at all ..."))


def test_placeholder_construction():
    tok = tokenize_with_placeholders(Caption.from_text("a cat"), 1, seq_len=16)
    assert tok.token_ids == (word_id("a"), word_id("cat"), PLACEHOLDER_ID) + (PAD_ID,) * 13
    assert tok.placeholder_positions == (2,)


def test_no_placeholders():
    tok = tokenize_with_placeholders("a cat", 0, seq_len=4)
    assert tok.token_ids == (word_id("a"), word_id("cat"), PAD_ID, PAD_ID)
    assert tok.placeholder_positions == ()


def test_empty_caption_placeholder_first():
    tok = tokenize_with_placeholders("", 1, seq_len=4)
    assert tok.token_ids == (PLACEHOLDER_ID, PAD_ID, PAD_ID, PAD_ID)


def test_overflow():
    with pytest.raises(CaptionOverflow):
        tokenize_with_placeholders("one two three", 2, seq_len=4)


@given(st.lists(st.sampled_from(["red", "blue", "a", "circle", "on", "the", "left"]), max_size=10), st.integers(0, 4))
def test_placeholders_are_final_nonpad_positions(words, n):
    tok = tokenize_with_placeholders(" ".join(words), n, seq_len=16)
    nonpad = [i for i, t in enumerate(tok.token_ids) if t != PAD_ID]
    assert tok.num_placeholders == n
    assert list(tok.placeholder_positions) == nonpad[len(nonpad) - n :]


def test_zero_spw_row_is_position_encoding(encoder):
    tok = tokenize_with_placeholders("a cat", 1, seq_len=16)
    fe = fuse(tok, torch.zeros(1, DIM), encoder)
    pe = sinusoidal_table(16, DIM)
    assert torch.equal(fe.embeddings[0, 2], pe[2])


def test_ordered_substitution(encoder):
    tok = tokenize_with_placeholders("blue", 2, seq_len=16)
    spw = torch.randn(2, DIM)
    fe = fuse(tok, spw, encoder)
    assert torch.equal(fe.pre_position[0, 1], spw[0])
    assert torch.equal(fe.pre_position[0, 2], spw[1])


def test_subtracting_position_encoding_recovers_spws(encoder):
    tok = tokenize_with_placeholders("small green ring", 1, seq_len=16)
    spw = torch.randn(1, DIM, dtype=torch.float64).half()
    fe = fuse(tok, spw, encoder)
    pe = sinusoidal_table(16, DIM)
    assert torch.allclose(fe.embeddings - fe.pre_position, pe.expand_as(fe.embeddings), atol=1e-6)
    assert torch.equal(fe.pre_position[0, 3], spw[0].float())
    assert torch.allclose(fe.embeddings[0, 3] - pe[3], spw[0].float(), atol=1e-6)


def test_non_placeholder_rows_are_token_lookups(encoder):
    tok = tokenize_with_placeholders("a red square", 1, seq_len=16)
    fe = fuse(tok, torch.randn(1, DIM), encoder)
    ids = tok.ids_tensor()
    keep = ~tok.placeholder_mask()
    assert torch.equal(fe.pre_position[0, keep], encoder.token_embedding.weight[ids[keep]])


def test_count_mismatch(encoder):
    tok = tokenize_with_placeholders("a cat", 2, seq_len=16)
    with pytest.raises(SpwCountMismatch):
        fuse(tok, torch.randn(1, DIM), encoder)
    ids, ph = batch_tokens([tok])
    with pytest.raises(SpwCountMismatch):
        fuse_batch(ids, ph, torch.randn(1, 2, DIM + 1), encoder)


def test_encoder_required(encoder):
    tok = tokenize_with_placeholders("a cat", 0, seq_len=16)
    with pytest.raises(TextEncoderNotLoaded):
        fuse(tok, None, None)
    with pytest.raises(TextEncoderNotLoaded):
        encode_condition(fuse(tok, None, encoder), None)


def test_text_encoder_is_frozen_and_seeded():
    a = build_text_encoder(DIM, seq_len=16)
    b = build_text_encoder(DIM, seq_len=16)
    assert all(not p.requires_grad for p in a.parameters())
    assert all(torch.equal(x, y) for x, y in zip(a.state_dict().values(), b.state_dict().values()))
    state = torch.random.get_rng_state()
    build_text_encoder(DIM, seq_len=16)
    assert torch.equal(state, torch.random.get_rng_state())


def test_condition_is_deterministic(encoder):
    spw = torch.randn(1, 1, DIM)
    a = condition_from_captions(["a cat"], spw, encoder, 1)
    b = condition_from_captions(["a cat"], spw.clone(), encoder, 1)
    assert torch.equal(a.values, b.values) and torch.equal(a.mask, b.mask)
    assert torch.isfinite(a.values).all()


def test_gradient_reaches_spws_but_not_encoder(encoder):
    spw = torch.randn(1, 1, DIM, requires_grad=True)
    cond = condition_from_captions(["a blue ring"], spw, encoder, 1)
    cond.values.square().sum().backward()
    assert spw.grad is not None and spw.grad.abs().sum() > 0
    assert all(p.grad is None for p in encoder.parameters())


def test_finite_differences_match_autograd(encoder):
    enc64 = build_text_encoder(DIM, seq_len=16).double()
    probe = torch.randn(16, DIM, dtype=torch.float64, generator=torch.Generator().manual_seed(3))

    def f(v):
        ids, ph = batch_tokens([tokenize_with_placeholders("a red circle", 1, seq_len=16)])
        fe = fuse_batch(ids, ph, v, enc64)
        fe.embeddings = fe.embeddings.double()
        return (encode_condition(fe, enc64).values[0] * probe).sum()

    gen = torch.Generator().manual_seed(0)
    v = torch.randn(1, 1, DIM, dtype=torch.float64, generator=gen, requires_grad=True)
    f(v).backward()
    for _ in range(10):
        j = int(torch.randint(0, DIM, (1,), generator=gen))
        h = 1e-5
        plus, minus = v.detach().clone(), v.detach().clone()
        plus[0, 0, j] += h
        minus[0, 0, j] -= h
        fd = (f(plus) - f(minus)).item() / (2 * h)
        assert fd == pytest.approx(v.grad[0, 0, j].item(), rel=1e-3, abs=1e-8)


def test_spw_change_leaves_other_rows(encoder):
    ids, ph = batch_tokens([tokenize_with_placeholders("a", 1, seq_len=16)])
    a = fuse_batch(ids, ph, torch.randn(1, 1, DIM), encoder)
    b = fuse_batch(ids, ph, torch.randn(1, 1, DIM), encoder)
    assert torch.equal(a.pre_position[~ph], b.pre_position[~ph])
    assert not torch.equal(a.pre_position[ph], b.pre_position[ph])
