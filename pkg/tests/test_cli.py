from __future__ import annotations

import csv
import json

import numpy as np
import pytest

from mtgc import toydata
from mtgc.cli import main
from mtgc.container import unpack

TINY = {
    "resolution": 16, "image_size": 64, "D_text": 16, "num_fixtures": 4, "pool_size": 8, "pool_image_size": 32,
    "codec_steps": 5, "vit_steps": 2, "prior_steps": 2, "stage_steps": [3, 3, 2], "batch_size": 2, "steps": 4,
}


@pytest.fixture(scope="module")
def system(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(TINY))
    fx = root / "fx"
    assert main(["make-fixtures", "--out", str(fx), "--n", "4", "--size", "64"]) == 0
    common = ["--config", str(cfg), "--fixture-dir", str(fx), "--checkpoint-dir", str(root / "ckpt")]
    assert main(["pretrain", *common]) == 0
    assert main(["train", "--stage", "1", *common]) == 0
    return root, fx, common


def test_make_fixtures_layout(system):
    _, fx, _ = system
    rows = list(csv.reader(open(fx / "captions.tsv"), delimiter="\t"))
    assert [r[0] for r in rows] == [f"scene{i:03d}" for i in range(4)]
    assert all((fx / "images" / f"{r[0]}.png").exists() for r in rows)


def test_stage_two_needs_stage_one(tmp_path, system):
    root, fx, _ = system
    common = ["--config", str(root / "cfg.json"), "--fixture-dir", str(fx), "--checkpoint-dir", str(tmp_path)]
    assert main(["train", "--stage", "2", *common]) == 60


def test_resume_extends_the_log(system):
    root, _, common = system
    assert main(["train", "--stage", "2", *common]) == 0
    assert main(["train", "--stage", "2", "--resume", *common]) == 0
    steps = [int(r[0]) for r in list(csv.reader(open(root / "ckpt" / "loss_stage2_lambda2.csv")))[1:]]
    assert steps == list(range(6))


def test_encode_is_deterministic_and_decodes(system, tmp_path, capsys):
    _, fx, common = system
    img = str(fx / "images" / "scene001.png")
    assert main(["encode", *common, "--image", img, "--out", str(tmp_path / "a.mtgc")]) == 0
    assert "total_bpp" in capsys.readouterr().out
    assert main(["encode", *common, "--image", img, "--out", str(tmp_path / "b.mtgc")]) == 0
    a = (tmp_path / "a.mtgc").read_bytes()
    assert a == (tmp_path / "b.mtgc").read_bytes()
    _, meta = unpack(a)
    assert (meta.image_h, meta.image_w, meta.lambda_index, meta.L, meta.D_text) == (64, 64, 2, 1, 16)
    assert main(["decode", *common, "--in", str(tmp_path / "a.mtgc"), "--out", str(tmp_path / "a.png")]) == 0
    assert toydata.load_image(tmp_path / "a.png").shape == (3, 64, 64)


def test_encode_missing_caption(system, tmp_path):
    _, fx, common = system
    img = tmp_path / "unknown.png"
    img.write_bytes((fx / "images" / "scene000.png").read_bytes())
    assert main(["encode", *common, "--image", str(img), "--out", str(tmp_path / "x.mtgc")]) == 10


def test_decode_errors(system, tmp_path):
    _, _, common = system
    bad = tmp_path / "bad.mtgc"
    bad.write_bytes(b"NOPE" + bytes(40))
    assert main(["decode", *common, "--in", str(bad), "--out", str(tmp_path / "o.png")]) == 72
    assert main(["decode", *common, "--in", str(tmp_path / "absent.mtgc"), "--out", str(tmp_path / "o.png")]) == 3


def test_eval_pairs_and_plot(system, tmp_path):
    _, fx, common = system
    ref = fx / "images" / "scene000.png"
    img = toydata.load_image(ref)
    rows = []
    for k, sigma in enumerate((0.02, 0.05, 0.1)):
        noisy = np.clip(img + np.random.default_rng(k).normal(0, sigma, img.shape), 0, 1)
        p = tmp_path / f"n{k}.png"
        toydata.save_image(p, noisy)
        rows.append(f"{ref}\t{p}\tnoise\t{0.1 / (k + 1)}")
    (tmp_path / "pairs.tsv").write_text("\n".join(rows) + "\n")
    assert main(["eval", *common, "--pairs", str(tmp_path / "pairs.tsv"), "--out", str(tmp_path / "m.csv")]) == 0
    recs = list(csv.DictReader(open(tmp_path / "m.csv")))
    assert len(recs) == 3 and float(recs[0]["psnr"]) > float(recs[2]["psnr"])
    assert main(["plot", "--csv", str(tmp_path / "m.csv"), "--out", str(tmp_path / "rd.svg")]) == 0
    assert (tmp_path / "rd.svg").read_text().count("curve-noise") == 1


def test_eval_needs_input(system, tmp_path):
    _, _, common = system
    assert main(["eval", *common, "--out", str(tmp_path / "m.csv")]) == 2


def test_bad_config_is_a_config_error(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"lambda_index": 7}))
    assert main(["pretrain", "--config", str(cfg), "--checkpoint-dir", str(tmp_path)]) == 2
    cfg.write_text(json.dumps({"wings": 2}))
    assert main(["pretrain", "--config", str(cfg), "--checkpoint-dir", str(tmp_path)]) == 2


def test_argparse_rejects_bad_stage():
    with pytest.raises(SystemExit) as info:
        main(["train", "--stage", "4"])
    assert info.value.code == 2
