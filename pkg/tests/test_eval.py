from __future__ import annotations

import warnings

import numpy as np
import pytest
import torch
from scipy.ndimage import gaussian_filter

from mtgc import toydata
from mtgc.errors import NotEnoughPoints
from mtgc.eval import (
    METRICS,
    PSNR_CAP_DB,
    CrossModalPair,
    MetricRecord,
    cosine_distance,
    embedding_distance,
    entropy_comparison,
    image_entropy,
    ms_ssim,
    psnr,
    rd_plot,
    read_records,
    register_metric,
)
from mtgc.eval.metrics import num_scales
from mtgc.eval.rd import mean_curve
from mtgc.eval.representations import lossless_bits, match_bpp, semantic_map, sketch_image
from mtgc.fusion import build_text_encoder
from mtgc.tascm import VisionBackbone, VitConfig
from oracles import entropy_bruteforce, ms_ssim_direct, psnr_direct, quantize8


@pytest.fixture(scope="module")
def random_pairs():
    rng = np.random.default_rng(50)
    pairs = []
    for _ in range(50):
        h, w = rng.integers(24, 180, size=2)
        x = rng.random((3, h, w))
        y = np.clip(x + rng.normal(0, rng.uniform(0.01, 0.3), x.shape), 0, 1)
        pairs.append((x, y))
    return pairs


@pytest.fixture(scope="module")
def corpus():
    return [img for _, img, _ in toydata.make_corpus(6, 64, seed=11)]


def test_psnr_matches_oracle(random_pairs):
    for x, y in random_pairs:
        assert abs(psnr(x, y) - psnr_direct(x, y)) <= 1e-9


def test_ms_ssim_matches_oracle(random_pairs):
    for x, y in random_pairs:
        n = num_scales(min(x.shape[-2:]))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            got = ms_ssim(x, y)
        assert abs(got - ms_ssim_direct(x, y, n)) <= 1e-6


def test_entropy_matches_oracle(random_pairs):
    for x, _ in random_pairs[:10]:
        assert abs(image_entropy(x) - entropy_bruteforce(quantize8(x))) <= 1e-9


def test_psnr_closed_forms():
    x = np.full((3, 8, 8), 0.5)
    assert psnr(x, x) == PSNR_CAP_DB == 100.0
    assert psnr(x, x + 0.1) == pytest.approx(20.0, abs=1e-9)
    with pytest.raises(ValueError):
        psnr(x, x[:, :4])


def test_psnr_under_gaussian_noise():
    rng = np.random.default_rng(0)
    x = rng.random((3, 128, 128))
    vals = [psnr(x, x + rng.normal(0, 0.1, x.shape)) for _ in range(10)]
    assert all(abs(v - 20.0) <= 0.5 for v in vals)


def test_ms_ssim_identity_and_range(corpus):
    img = corpus[0]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        assert ms_ssim(img, img) == pytest.approx(1.0, abs=1e-12)
        assert 0.0 <= ms_ssim(img, np.zeros_like(img)) <= 1.0


def test_ms_ssim_warns_on_small_images():
    x = np.random.default_rng(1).random((3, 64, 64))
    with pytest.warns(UserWarning):
        ms_ssim(x, x)
    assert num_scales(160) == 5 and num_scales(64) == 3 and num_scales(20) == 1


def test_inverted_images_score_low():
    for _, img, _ in toydata.make_corpus(4, 192, seed=2):
        assert ms_ssim(img, 1.0 - img) < 0.5


def test_ms_ssim_falls_with_blur():
    img = toydata.make_corpus(1, 192, seed=4)[0][1]
    scores = [ms_ssim(img, gaussian_filter(img, sigma=(0, s, s))) for s in (0.5, 1.0, 2.0, 4.0, 8.0)]
    assert all(a > b for a, b in zip(scores, scores[1:]))


def test_entropy_comparison_trivial_cases(corpus):
    flat = [np.full((3, 16, 16), 0.3)] * 3
    reps = {"hci": lambda i, im: im, "sketch": lambda i, im: sketch_image(im), "semantic_map": lambda i, im: semantic_map(im, k=2)}
    assert entropy_comparison(flat, reps) == {"hci": 0.0, "sketch": 0.0, "semantic_map": 0.0}
    one = entropy_comparison(corpus[:1], {"hci": lambda i, im: im})
    assert one["hci"] == image_entropy(corpus[0])
    with pytest.raises(ValueError):
        entropy_comparison([], reps)


def test_bpp_matching_picks_closest(corpus):
    img = corpus[1]
    px = img.shape[-1] * img.shape[-2]
    for kind in ("sketch", "semantic_map"):
        m = match_bpp(img, 0.05, kind)
        assert m.bpp == lossless_bits(m.image) / px
        assert m.image.shape[-2:] == img.shape[-2:]
    with pytest.raises(ValueError):
        match_bpp(img, 0.05, "depth")


def test_cosine_distance_cases():
    v = torch.tensor([1.0, 2.0, -3.0])
    assert cosine_distance(v, v) == pytest.approx(0.0, abs=1e-15)
    assert cosine_distance(torch.tensor([1.0, 0.0]), torch.tensor([0.0, 5.0])) == 1.0
    assert cosine_distance(v, -v) == pytest.approx(0.0, abs=1e-15)
    assert cosine_distance(v, -v, absolute=False) == pytest.approx(2.0)
    with pytest.raises(ValueError):
        cosine_distance(v, torch.zeros(3))


def test_embedding_distance_on_toy_corpus():
    torch.manual_seed(0)
    backbone = VisionBackbone(VitConfig(image_size=64, width=32, depth=1, num_heads=2))
    backbone.loaded = True
    pair = CrossModalPair(backbone, build_text_encoder(32))
    for _, img, cap in toydata.make_corpus(8, 64, seed=6):
        d = embedding_distance(torch.from_numpy(img)[None], cap, pair)
        assert 0.0 < d <= 1.0


def _records():
    out = []
    for i, img_id in enumerate(("a", "b")):
        for k, lam in enumerate((1, 2, 3)):
            out.append(MetricRecord(img_id, 0.01 * lam + 0.001 * i, 20.0 + lam + i, 0.8 + 0.02 * lam, 7.0 - 0.1 * k))
    return out


def test_rd_plot_outputs(tmp_path):
    recs = _records()
    svg, csv_path = rd_plot(recs, tmp_path / "rd.svg")
    assert read_records(csv_path) == recs
    text = svg.read_text()
    assert 'id="curve-mtgc"' in text
    svg2, _ = rd_plot(read_records(csv_path), tmp_path / "again.svg")
    assert svg2.read_bytes() == svg.read_bytes()
    png, _ = rd_plot(recs, tmp_path / "rd.png", metric="ms_ssim")
    assert png.read_bytes()[:4] == b"\x89PNG"


def test_rd_plot_needs_points(tmp_path):
    with pytest.raises(NotEnoughPoints):
        rd_plot([], tmp_path / "x.svg")
    with pytest.raises(NotEnoughPoints):
        rd_plot(_records()[:1], tmp_path / "x.svg")


def test_csv_header(tmp_path):
    _, csv_path = rd_plot(_records(), tmp_path / "rd.svg")
    assert csv_path.read_text().splitlines()[0] == "image_id,method,bpp,psnr,ms_ssim,entropy"


def test_mean_curve():
    curve = mean_curve(_records())
    assert [r.image_id for r in curve] == ["mean@0", "mean@1", "mean@2"]
    assert curve[0].bpp == pytest.approx(0.0105)
    assert curve[2].psnr_db == pytest.approx(23.5)


def test_metric_record_range():
    with pytest.raises(ValueError):
        MetricRecord("x", 0.1, 20.0, 1.5, 3.0)


def test_register_metric():
    register_metric("mae", lambda x, y: float(np.mean(np.abs(np.asarray(x) - np.asarray(y)))))
    try:
        assert METRICS["mae"](np.zeros(4), np.ones(4)) == 1.0
    finally:
        METRICS.pop("mae")
