"""``mtgc`` command-line entry point."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import sys
from pathlib import Path

import torch

from mtgc.config import RunConfig, load_config
from mtgc.errors import ConfigError, MissingPrerequisiteCheckpoint, MtgcError

EXIT_OK = 0
EXIT_UNEXPECTED = 1


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--lambda-index", type=int, choices=(1, 2, 3), dest="lambda_index")
    p.add_argument("--checkpoint-dir", dest="checkpoint_dir")
    p.add_argument("--fixture-dir", dest="fixture_dir")
    p.add_argument("--threads", type=int, default=1, help="torch intra-op threads (1 = reproducible mode)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mtgc", description="Multimodal-guided generative image compression")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-fixtures", help="render the procedural captioned image set")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=24)
    p.add_argument("--size", type=int, default=1024)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("pretrain", help="train the HCI codecs and the frozen base models")
    _common(p)

    p = sub.add_parser("train", help="run one guided training stage")
    _common(p)
    p.add_argument("--stage", type=int, choices=(1, 2, 3), required=True)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--max-steps", type=int, dest="max_steps")

    p = sub.add_parser("encode", help="compress an image into a .mtgc container")
    _common(p)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--image-id", dest="image_id", help="caption lookup key (default: file stem)")
    p.add_argument("--captions", help="caption fixture file (default: fixture dir captions.tsv)")

    p = sub.add_parser("decode", help="reconstruct an image from a .mtgc container")
    _common(p)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)

    p = sub.add_parser("eval", help="metrics for image pairs or a lambda sweep over the fixtures")
    _common(p)
    p.add_argument("--pairs", help="TSV: reference<TAB>candidate[<TAB>method[<TAB>bpp]]")
    p.add_argument("--sweep", action="store_true", help="encode/decode every fixture at each lambda")
    p.add_argument("--limit", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("plot", help="RD plot (SVG/PNG) from a metrics CSV")
    p.add_argument("--csv", dest="pairs", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--metric", default="psnr", choices=("psnr", "ms_ssim", "entropy"))
    return parser


def _config(args) -> RunConfig:
    keys = ("seed", "lambda_index", "checkpoint_dir", "fixture_dir", "steps")
    overrides = {k: getattr(args, k, None) for k in keys}
    cfg = load_config(args.config, overrides)
    _log("effective config (flag > file > default):\n" + cfg.dumps())
    return cfg


def cmd_make_fixtures(args) -> int:
    from mtgc import toydata

    root = toydata.write_fixture_set(args.out, n=args.n, size=args.size, seed=args.seed)
    print(root)
    return EXIT_OK


def cmd_pretrain(args) -> int:
    from mtgc.build import ensure_base, ensure_codecs

    cfg = _config(args)
    ensure_codecs(cfg, _log)
    ensure_base(cfg, _log)
    print(cfg.checkpoints)
    return EXIT_OK


def cmd_train(args) -> int:
    from dataclasses import replace

    from mtgc.build import train_stage

    cfg = _config(args)
    if args.max_steps is not None:
        steps = list(cfg.stage_steps)
        steps[args.stage - 1] = args.max_steps
        cfg = replace(cfg, stage_steps=tuple(steps))
    result = train_stage(cfg, args.stage, resume=args.resume, log=_log)
    print(result.checkpoint)
    return EXIT_OK


def cmd_encode(args) -> int:
    from mtgc.build import load_system
    from mtgc.container import bpp_report
    from mtgc.guidance_text import CaptionerSpec, acquire_caption
    from mtgc.pipeline import encode_image
    from mtgc.toydata import load_image

    cfg = _config(args)
    image_path = Path(args.image)
    image_id = args.image_id or image_path.stem
    captions = args.captions or str(cfg.fixtures / "captions.tsv")
    caption = acquire_caption(image_id, CaptionerSpec(fixture_path=captions))
    models, codecs = load_system(cfg)
    if cfg.lambda_index not in codecs:
        raise FileNotFoundError(f"no codec checkpoint for lambda index {cfg.lambda_index}")
    image = torch.from_numpy(load_image(image_path))
    data = encode_image(image, caption, models, codecs[cfg.lambda_index], cfg.lambda_index)
    Path(args.out).write_bytes(data)
    for line in bpp_report(data).lines():
        print(line)
    return EXIT_OK


def cmd_decode(args) -> int:
    from mtgc.build import load_system
    from mtgc.container import unpack
    from mtgc.pipeline import decode_container
    from mtgc.toydata import save_image

    cfg = _config(args)
    data = Path(args.inp).read_bytes()
    _, meta = unpack(data)
    models, codecs = load_system(dataclasses.replace(cfg, lambda_index=meta.lambda_index))
    if meta.lambda_index not in codecs:
        raise FileNotFoundError(f"no codec checkpoint for lambda index {meta.lambda_index}")
    out = decode_container(data, models, codecs[meta.lambda_index], steps=cfg.steps, seed=cfg.seed)
    save_image(args.out, out.image.numpy())
    print(args.out)
    return EXIT_OK


def _read_pairs(path: str) -> list[list[str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [row for row in csv.reader(fh, delimiter="\t") if row and not row[0].startswith("#")]


def cmd_eval(args) -> int:
    from mtgc.container import bpp_report
    from mtgc.eval import MetricRecord, image_entropy, ms_ssim, psnr, write_records
    from mtgc.toydata import load_image

    cfg = _config(args)
    records = []
    system = None
    if args.pairs:
        for row in _read_pairs(args.pairs):
            ref = load_image(row[0])
            method = row[2] if len(row) > 2 and row[2] else "candidate"
            if row[1].endswith(".mtgc"):
                from mtgc.build import load_system
                from mtgc.container import unpack
                from mtgc.pipeline import decode_container

                system = system or load_system(cfg)
                data = Path(row[1]).read_bytes()
                _, meta = unpack(data)
                cand = decode_container(data, system[0], system[1][meta.lambda_index], cfg.steps, cfg.seed).image.numpy()
                bpp = float(bpp_report(data).total_bpp)
            else:
                cand = load_image(row[1])
                bpp = float(row[3]) if len(row) > 3 and row[3] else 0.0
            records.append(MetricRecord(Path(row[0]).stem, bpp, psnr(ref, cand), ms_ssim(ref, cand), image_entropy(cand), method))
    elif args.sweep:
        from mtgc.build import fixture_examples, load_system
        from mtgc.pipeline import decode_container, encode_image

        default, codecs = load_system(cfg)
        variants = {}
        for idx in codecs:
            try:
                variants[idx] = load_system(dataclasses.replace(cfg, lambda_index=idx))[0]
            except MissingPrerequisiteCheckpoint:
                variants[idx] = default  # only one lambda variant trained
        for ex in fixture_examples(cfg, args.limit):
            for idx in sorted(codecs):
                models = variants[idx]
                data = encode_image(ex.image, ex.caption, models, codecs[idx], idx)
                out = decode_container(data, models, codecs[idx], cfg.steps, cfg.seed).image
                records.append(
                    MetricRecord(ex.image_id, float(bpp_report(data).total_bpp), psnr(ex.image, out), ms_ssim(ex.image, out), image_entropy(out), "mtgc")
                )
    else:
        raise ConfigError("eval needs --pairs or --sweep")
    write_records(records, args.out)
    print(args.out)
    return EXIT_OK


def cmd_plot(args) -> int:
    from mtgc.eval.rd import mean_curve, rd_plot, read_records

    out, csv_path = rd_plot(mean_curve(read_records(args.pairs)), args.out, metric=args.metric)
    print(out)
    return EXIT_OK


COMMANDS = {
    "make-fixtures": cmd_make_fixtures,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "encode": cmd_encode,
    "decode": cmd_decode,
    "eval": cmd_eval,
    "plot": cmd_plot,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    torch.set_num_threads(max(1, getattr(args, "threads", 1) or 1))
    try:
        return COMMANDS[args.command](args)
    except MtgcError as exc:
        _log(f"error: {type(exc).__name__}: {exc}")
        return exc.exit_code
    except FileNotFoundError as exc:
        _log(f"error: {exc}")
        return 3


if __name__ == "__main__":
    sys.exit(main())
