from __future__ import annotations

import numpy as np
import pytest
import torch

from mtgc import toydata
from mtgc.data import IndexStream, full_box, load_captioned_dir, make_batch, random_box


def test_fixture_set_roundtrip(tmp_path):
    toydata.write_fixture_set(tmp_path, n=3, size=32, seed=1)
    examples = load_captioned_dir(tmp_path)
    corpus = toydata.make_corpus(3, 32, seed=1)
    assert [e.image_id for e in examples] == [c[0] for c in corpus]
    assert [e.caption for e in examples] == [c[2] for c in corpus]
    for e, (_, img, _) in zip(examples, corpus):
        assert e.image.shape == (3, 32, 32)
        assert np.abs(e.image.numpy() - img).max() <= 0.5 / 255 + 1e-7
    assert len(load_captioned_dir(tmp_path, limit=2)) == 2


def test_corpus_is_seeded():
    a = toydata.make_corpus(2, 16, seed=4)
    b = toydata.make_corpus(2, 16, seed=4)
    assert all(np.array_equal(x[1], y[1]) and x[2] == y[2] for x, y in zip(a, b))
    assert all(0 <= x[1].min() and x[1].max() <= 1 for x in a)


def test_boxes():
    gen = torch.Generator().manual_seed(0)
    for _ in range(200):
        y, x, side = random_box(40, 60, 0.5, gen)
        assert 20 <= side <= 40 and 0 <= y <= 40 - side and 0 <= x <= 60 - side
    assert full_box(torch.zeros(3, 40, 60)) == (0, 10, 40)


def test_batch_crops_image_and_hci_together():
    from mtgc.data import Example

    img = torch.rand(3, 32, 32)
    ex = Example("a", img, "cap", hci=img.clone())
    batch = make_batch([ex, ex], [0, 1], 16, torch.Generator().manual_seed(1), min_scale=0.5)
    assert batch.images.shape == (2, 3, 16, 16) and batch.hci.shape == (2, 3, 16, 16)
    assert torch.equal(batch.images, batch.hci)
    assert batch.captions == ["cap", "cap"] and batch.ids == ["a", "a"]


def test_index_stream_covers_each_epoch():
    stream = IndexStream(5, torch.Generator().manual_seed(2))
    first, second = stream.take(5), stream.take(5)
    assert sorted(first) == sorted(second) == list(range(5))
    with pytest.raises(ValueError):
        IndexStream(0, torch.Generator())
