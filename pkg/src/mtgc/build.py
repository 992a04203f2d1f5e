"""Orchestration shared by the CLI and the acceptance suite: fixtures, base models, stages."""

from __future__ import annotations

from pathlib import Path
from typing import Callable

import numpy as np
import torch

from mtgc import toydata
from mtgc.config import LAMBDA_BY_INDEX, RunConfig
from mtgc.data import Example, load_captioned_dir
from mtgc.errors import MissingPrerequisiteCheckpoint
from mtgc.fusion import build_text_encoder
from mtgc.hci_codec.codec import hci_decode, hci_encode, load_codec, save_codec, train_codec
from mtgc.hci_codec.model import HciCodec, RdCodecConfig
from mtgc.tascm import VitConfig, pretrain_backbone
from mtgc.training import (
    ModelConfig,
    MtgcModels,
    StagePlan,
    StageResult,
    load_base,
    load_stage,
    pretrain_prior,
    run_stage,
    save_base,
)

Log = Callable[[str], None]
POOL_SEED = 1000


def _quiet(_: str) -> None:
    pass


def model_config(cfg: RunConfig) -> ModelConfig:
    return ModelConfig(resolution=cfg.resolution, num_spw=cfg.L, text_dim=cfg.D_text, vit=VitConfig(image_size=cfg.resolution))


def ensure_fixtures(cfg: RunConfig, n: int = 24, log: Log = _quiet) -> Path:
    root = cfg.fixtures
    if not (root / "captions.tsv").exists():
        log(f"writing {n} fixture images to {root}")
        toydata.write_fixture_set(root, n=n, size=cfg.image_size, seed=0)
    return root


def fixture_examples(cfg: RunConfig, limit: int | None = None) -> list[Example]:
    return load_captioned_dir(ensure_fixtures(cfg), limit=limit if limit is not None else cfg.num_fixtures)


def pool_examples(cfg: RunConfig) -> list[Example]:
    corpus = toydata.make_corpus(cfg.pool_size, cfg.pool_image_size, seed=POOL_SEED + cfg.seed)
    return [Example(i, torch.from_numpy(img), cap) for i, img, cap in corpus]


def ensure_codecs(cfg: RunConfig, log: Log = _quiet) -> dict[int, HciCodec]:
    cfg.checkpoints.mkdir(parents=True, exist_ok=True)
    codecs = {}
    images = None
    for idx, lam in LAMBDA_BY_INDEX.items():
        path = cfg.codec_path(idx)
        if path.exists():
            codecs[idx] = load_codec(path)
            continue
        if images is None:
            images = torch.stack([ex.image for ex in fixture_examples(cfg)])
        log(f"training HCI codec lambda={lam:g}")
        codec, _ = train_codec(
            images, RdCodecConfig(lambda_rd=lam), steps=cfg.codec_steps, seed=cfg.seed,
            log=lambda s, loss, r, d: log(f"  codec step {s}: loss={loss:.4f} rate={r:.4f} dist={d:.1f}"),
        )
        save_codec(codec, path, extra={"lambda_index": idx, "steps": cfg.codec_steps})
        codecs[idx] = codec
    return codecs


def ensure_base(cfg: RunConfig, log: Log = _quiet):
    """Pretrained frozen prior U-Net, text encoder and vision backbone (cached in ``base.pt``)."""
    path = cfg.base_path()
    mcfg = model_config(cfg)
    if path.exists():
        loaded = load_base(path)
        if loaded[0] != mcfg:
            raise MissingPrerequisiteCheckpoint(f"{path} was built for a different model config")
        return loaded
    cfg.checkpoints.mkdir(parents=True, exist_ok=True)
    pool = pool_examples(cfg)
    pool_images = torch.stack([ex.image for ex in pool])

    def vit_batch(gen, b):
        idx = torch.randint(0, len(pool_images), (b,), generator=gen)
        return pool_images[idx]

    log("pretraining vision backbone")
    backbone = pretrain_backbone(vit_batch, mcfg.vit, steps=cfg.vit_steps, seed=cfg.seed,
                                 log=lambda s, v: log(f"  vit step {s}: loss={v:.4f}"))
    text_encoder = build_text_encoder(cfg.D_text)
    log("pretraining prior denoiser")
    unet = pretrain_prior(pool, text_encoder, mcfg, steps=cfg.prior_steps, batch_size=cfg.batch_size, seed=cfg.seed,
                          min_scale=cfg.min_crop_scale,
                          progress=lambda s, v: log(f"  prior step {s}: loss={v:.4f}") if s % 250 == 0 else None)
    save_base(path, mcfg, unet, text_encoder, backbone)
    return mcfg, unet, text_encoder, backbone


def attach_hci(examples: list[Example], codec: HciCodec) -> list[Example]:
    for ex in examples:
        _, bitstream = hci_encode(codec, ex.image)
        ex.hci = hci_decode(codec, bitstream)
    return examples


def training_examples(cfg: RunConfig, log: Log = _quiet) -> list[Example]:
    codecs = ensure_codecs(cfg, log)
    return attach_hci(fixture_examples(cfg), codecs[cfg.lambda_index])


def stage_plan(cfg: RunConfig, stage: int) -> StagePlan:
    return StagePlan.for_stage(stage, batch_size=cfg.batch_size, max_steps=cfg.stage_steps[stage - 1])


def models_for_stage(cfg: RunConfig, stage: int, log: Log = _quiet) -> MtgcModels:
    """Stage 1 starts from the base models; later stages need the previous stage's checkpoint."""
    if stage == 1:
        mcfg, unet, text_encoder, backbone = ensure_base(cfg, log)
        return MtgcModels.from_base(mcfg, unet, text_encoder, backbone, seed=cfg.seed)
    prev = cfg.stage_path(stage - 1)
    if not prev.exists():
        stage1 = cfg.stage_path(1)
        if stage == 3 and stage1.exists():
            prev = stage1
        else:
            raise MissingPrerequisiteCheckpoint(f"stage {stage} needs {prev}")
    models, _ = load_stage(prev)
    return models


def train_stage(cfg: RunConfig, stage: int, resume: bool = False, log: Log = _quiet) -> StageResult:
    plan = stage_plan(cfg, stage)
    examples = training_examples(cfg, log)
    blob = None
    if resume:
        path = cfg.stage_path(stage)
        if not path.exists():
            raise MissingPrerequisiteCheckpoint(f"nothing to resume at {path}")
        models, blob = load_stage(path)
    else:
        models = models_for_stage(cfg, stage, log)
    log(f"stage {stage}: {plan.total_steps(len(examples))} steps, lr={plan.learning_rate:g}, batch={plan.batch_size}")
    return run_stage(
        plan, examples, models, seed=cfg.seed + stage, log_path=cfg.log_path(stage),
        checkpoint_out=cfg.stage_path(stage), resume=blob, min_scale=cfg.min_crop_scale,
        progress=lambda s, v: log(f"  stage {stage} step {s}: loss={v:.4f}") if s % 250 == 0 else None,
    )


def load_system(cfg: RunConfig) -> tuple[MtgcModels, dict[int, HciCodec]]:
    """Most-trained stage checkpoint plus every codec."""
    for stage in (3, 2, 1):
        if cfg.stage_path(stage).exists():
            models, _ = load_stage(cfg.stage_path(stage))
            break
    else:
        raise MissingPrerequisiteCheckpoint(f"no stage checkpoint under {cfg.checkpoints}")
    codecs = {i: load_codec(cfg.codec_path(i)) for i in LAMBDA_BY_INDEX if cfg.codec_path(i).exists()}
    return models, codecs


def as_numpy(img: torch.Tensor) -> np.ndarray:
    return img.detach().cpu().numpy().astype(np.float64)
