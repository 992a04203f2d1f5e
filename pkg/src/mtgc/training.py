"""Prior pretraining and the three-stage guided training schedule."""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import torch
from torch import nn

from mtgc import _accel
from mtgc.data import Batch, Example, IndexStream, make_batch
from mtgc.errors import MissingPrerequisiteCheckpoint, NonFiniteLoss
from mtgc.fusion import ConditioningEmbedding, TextEncoder, build_text_encoder, condition_from_captions
from mtgc.layers import frozen
from mtgc.mgdd.decoder import DenoiserInputs, denoise_predict, to_model_range
from mtgc.mgdd.diffusion import NoiseSchedule, forward_noise
from mtgc.mgdd.unet import ControlAdapter, UNet, UNetConfig
from mtgc.tascm import CmanConfig, SemEncConfig, Tascm, VisionBackbone, VitConfig

ADAM_BETAS = (0.9, 0.999)
STAGE_LR = {1: 1e-4, 2: 1e-4, 3: 5e-5}
STAGE_SETS = {1: ("adapter",), 2: ("semenc", "cman"), 3: ("adapter", "semenc", "cman")}
TRAINABLE_GROUPS = ("adapter", "semenc", "cman")
FROZEN_GROUPS = ("unet", "text_encoder", "backbone")
LOG_FIELDS = ("step", "stage", "loss", "lr")


@dataclass(frozen=True)
class StagePlan:
    stage: int
    trainable_sets: tuple[str, ...]
    learning_rate: float
    epochs: int = 8
    batch_size: int = 16
    max_steps: int | None = None

    def __post_init__(self):
        if self.stage not in STAGE_SETS:
            raise ValueError(f"stage must be 1, 2 or 3, got {self.stage}")
        bad = set(self.trainable_sets) - set(TRAINABLE_GROUPS)
        if bad:
            raise ValueError(f"only {TRAINABLE_GROUPS} may be trained, got {sorted(bad)}")

    @classmethod
    def for_stage(cls, stage: int, **overrides) -> "StagePlan":
        base = cls(stage=stage, trainable_sets=STAGE_SETS.get(stage, ()), learning_rate=STAGE_LR.get(stage, 0.0))
        return replace(base, **overrides)

    def total_steps(self, dataset_size: int) -> int:
        if self.max_steps is not None:
            return self.max_steps
        return self.epochs * math.ceil(dataset_size / self.batch_size)


@dataclass(frozen=True)
class ModelConfig:
    resolution: int = 64
    num_spw: int = 1
    text_dim: int = 256
    base_channels: int = 32
    mid_channels: int = 64
    vit: VitConfig = field(default_factory=VitConfig)
    semenc: SemEncConfig = field(default_factory=SemEncConfig)

    @property
    def unet(self) -> UNetConfig:
        return UNetConfig(base_channels=self.base_channels, mid_channels=self.mid_channels, cond_dim=self.text_dim)

    @property
    def cman(self) -> CmanConfig:
        return CmanConfig(num_spw=self.num_spw, text_dim=self.text_dim)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["vit"] = VitConfig(**d.get("vit", {}))
        d["semenc"] = SemEncConfig(**d.get("semenc", {}))
        return cls(**d)


def state_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for key, tensor in sorted(module.state_dict().items()):
        h.update(key.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@dataclass
class MtgcModels:
    cfg: ModelConfig
    unet: UNet
    text_encoder: TextEncoder
    backbone: VisionBackbone
    adapter: ControlAdapter
    tascm: Tascm
    sched: NoiseSchedule = field(default_factory=NoiseSchedule.linear)
    completed_stages: set[int] = field(default_factory=set)

    @classmethod
    def from_base(cls, cfg: ModelConfig, unet: UNet, text_encoder: TextEncoder, backbone: VisionBackbone, seed: int = 0):
        """Fresh adapter (copied from the frozen encoder) and freshly initialised TASCM heads."""
        torch.manual_seed(seed)
        adapter = ControlAdapter.from_unet(unet)
        tascm = Tascm(backbone, cfg.semenc, cfg.cman)
        return cls(cfg, frozen(unet), frozen(text_encoder), backbone, adapter, tascm)

    def modules(self) -> dict[str, nn.Module]:
        return {
            "adapter": self.adapter,
            "semenc": self.tascm.semenc,
            "cman": self.tascm.cman,
            "unet": self.unet,
            "text_encoder": self.text_encoder,
            "backbone": self.backbone,
        }

    def groups(self) -> dict[str, list[nn.Parameter]]:
        return {name: list(m.parameters()) for name, m in self.modules().items()}

    def checksums(self, names=FROZEN_GROUPS) -> dict[str, str]:
        mods = self.modules()
        return {n: state_checksum(mods[n]) for n in names}


def apply_plan(models: MtgcModels, plan: StagePlan) -> list[nn.Parameter]:
    """Set ``requires_grad`` per group and return the trainable parameters."""
    trainable = []
    for name, params in models.groups().items():
        on = name in plan.trainable_sets
        for p in params:
            p.requires_grad_(on)
        if on:
            trainable.extend(params)
    return trainable


def make_optimizer(params: list[nn.Parameter], lr: float) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=lr, betas=ADAM_BETAS)


def stage_condition(models: MtgcModels, batch: Batch, stage: int) -> ConditioningEmbedding:
    """Stage I: caption only (zero placeholders). Stages II/III: caption plus pseudo-words."""
    if stage == 1:
        return condition_from_captions(batch.captions, None, models.text_encoder, 0)
    spws = models.tascm(batch.images)
    return condition_from_captions(batch.captions, spws, models.text_encoder, models.cfg.num_spw)


Denoiser = Callable[[MtgcModels, DenoiserInputs, torch.Tensor], torch.Tensor]


def _default_denoiser(models: MtgcModels, inp: DenoiserInputs, x0: torch.Tensor) -> torch.Tensor:
    return denoise_predict(models.unet, models.adapter, inp, use_control=True)


def draw_noise(batch_size: int, shape, gen: torch.Generator, num_timesteps: int):
    t = torch.randint(0, num_timesteps, (batch_size,), generator=gen)
    eps = torch.randn((batch_size, *shape), generator=gen)
    return t, eps


def stage_loss(
    models: MtgcModels,
    batch: Batch,
    stage: int,
    gen: torch.Generator | None = None,
    draws: tuple[torch.Tensor, torch.Tensor] | None = None,
    denoiser: Denoiser | None = None,
) -> torch.Tensor:
    """Mean squared noise-prediction error for one batch under the stage's conditioning."""
    if batch.hci is None:
        raise ValueError("guided training needs the decoded HCI for every example")
    x0 = to_model_range(batch.images)
    t, eps = draws if draws is not None else draw_noise(len(batch), x0.shape[1:], gen, models.sched.num_timesteps)
    x_t = forward_noise(x0, t, eps, models.sched)
    cond = stage_condition(models, batch, stage)
    eps_hat = (denoiser or _default_denoiser)(models, DenoiserInputs(x_t, t, cond, batch.hci), x0)
    return torch.mean((eps - eps_hat) ** 2)


def check_prerequisites(models: MtgcModels, plan: StagePlan) -> None:
    if plan.stage in (2, 3) and 1 not in models.completed_stages:
        raise MissingPrerequisiteCheckpoint(f"stage {plan.stage} needs a trained stage-1 adapter")


def training_step(
    models: MtgcModels,
    batch: Batch,
    plan: StagePlan,
    gen: torch.Generator,
    optimizer: torch.optim.Optimizer,
    denoiser: Denoiser | None = None,
) -> float:
    check_prerequisites(models, plan)
    optimizer.zero_grad(set_to_none=True)
    loss = stage_loss(models, batch, plan.stage, gen, denoiser=denoiser)
    if not torch.isfinite(loss):
        raise NonFiniteLoss(f"stage {plan.stage} loss is {loss.item()}")
    loss.backward()
    optimizer.step()
    return loss.item()


# checkpoints ----------------------------------------------------------------


def save_base(path: str | Path, cfg: ModelConfig, unet: UNet, text_encoder: TextEncoder, backbone: VisionBackbone) -> None:
    torch.save(
        {
            "kind": "base",
            "config": cfg.to_dict(),
            "unet": unet.state_dict(),
            "text_encoder": text_encoder.state_dict(),
            "backbone": backbone.state_dict(),
        },
        path,
    )


def load_base(path: str | Path) -> tuple[ModelConfig, UNet, TextEncoder, VisionBackbone]:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    cfg = ModelConfig.from_dict(blob["config"])
    unet = UNet(cfg.unet)
    unet.load_state_dict(blob["unet"])
    text_encoder = build_text_encoder(cfg.text_dim)
    text_encoder.load_state_dict(blob["text_encoder"])
    backbone = VisionBackbone(cfg.vit)
    backbone.load_state_dict(blob["backbone"])
    backbone = frozen(backbone)
    backbone.loaded = True
    return cfg, frozen(unet), frozen(text_encoder), backbone


def save_stage(path: str | Path, models: MtgcModels, plan: StagePlan, step: int, optimizer, gen: torch.Generator, extra: dict | None = None) -> None:
    torch.save(
        {
            "kind": "stage",
            "stage": plan.stage,
            "completed_stages": sorted(models.completed_stages),
            "config": models.cfg.to_dict(),
            "plan": asdict(plan),
            "step": step,
            "adam": {"betas": list(ADAM_BETAS), "lr": plan.learning_rate},
            "optimizer": optimizer.state_dict() if optimizer is not None else None,
            "generator": gen.get_state() if gen is not None else None,
            "unet": models.unet.state_dict(),
            "text_encoder": models.text_encoder.state_dict(),
            "backbone": models.backbone.state_dict(),
            "adapter": models.adapter.state_dict(),
            "semenc": models.tascm.semenc.state_dict(),
            "cman": models.tascm.cman.state_dict(),
            "extra": extra or {},
        },
        path,
    )


def load_stage(path: str | Path) -> tuple[MtgcModels, dict]:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("kind") != "stage":
        raise MissingPrerequisiteCheckpoint(f"{path} is not a stage checkpoint")
    cfg = ModelConfig.from_dict(blob["config"])
    unet = UNet(cfg.unet)
    unet.load_state_dict(blob["unet"])
    text_encoder = build_text_encoder(cfg.text_dim)
    text_encoder.load_state_dict(blob["text_encoder"])
    backbone = VisionBackbone(cfg.vit)
    backbone.load_state_dict(blob["backbone"])
    backbone = frozen(backbone)
    backbone.loaded = True
    models = MtgcModels.from_base(cfg, unet, text_encoder, backbone)
    models.adapter.load_state_dict(blob["adapter"])
    models.tascm.semenc.load_state_dict(blob["semenc"])
    models.tascm.cman.load_state_dict(blob["cman"])
    models.completed_stages = set(blob["completed_stages"])
    return models, blob


# loops ----------------------------------------------------------------------


@dataclass
class StageResult:
    losses: list[float]
    first_step: int
    checkpoint: Path | None


def _open_log(path: Path | None, append: bool):
    if path is None:
        return None, None
    fresh = not append or not path.exists()
    fh = open(path, "w" if fresh else "a", newline="", encoding="utf-8")
    writer = csv.writer(fh)
    if fresh:
        writer.writerow(LOG_FIELDS)
    return fh, writer


def run_stage(
    plan: StagePlan,
    examples: list[Example],
    models: MtgcModels,
    seed: int = 0,
    log_path: str | Path | None = None,
    checkpoint_out: str | Path | None = None,
    resume: dict | None = None,
    min_scale: float = 0.85,
    progress: Callable[[int, float], None] | None = None,
) -> StageResult:
    """Train one stage; optionally continue from a same-stage checkpoint blob (``resume``)."""
    if not examples:
        raise ValueError("dataset is empty")
    check_prerequisites(models, plan)
    params = apply_plan(models, plan)
    optimizer = make_optimizer(params, plan.learning_rate)
    gen = torch.Generator().manual_seed(seed)
    start = 0
    if resume is not None:
        if resume.get("stage") != plan.stage:
            raise MissingPrerequisiteCheckpoint("resume checkpoint belongs to a different stage")
        optimizer.load_state_dict(resume["optimizer"])
        gen.set_state(resume["generator"])
        start = int(resume["step"])
    stream = IndexStream(len(examples), gen)
    if resume is not None:
        stream.queue = list(resume["extra"].get("index_queue", []))
    total = plan.total_steps(len(examples))
    log_path = Path(log_path) if log_path is not None else None
    fh, writer = _open_log(log_path, append=resume is not None)
    losses = []
    try:
        with _accel.flush_denormals():
            for step in range(start, start + total):
                batch = make_batch(examples, stream.take(plan.batch_size), models.cfg.resolution, gen, min_scale)
                loss = training_step(models, batch, plan, gen, optimizer)
                losses.append(loss)
                if writer is not None:
                    writer.writerow([step, plan.stage, repr(loss), plan.learning_rate])
                if progress is not None:
                    progress(step, loss)
    finally:
        if fh is not None:
            fh.close()
    models.completed_stages.add(plan.stage)
    for p in params:
        p.requires_grad_(False)
    out = None
    if checkpoint_out is not None:
        out = Path(checkpoint_out)
        save_stage(out, models, plan, start + total, optimizer, gen, extra={"index_queue": list(stream.queue)})
    return StageResult(losses, start, out)


def prior_loss(unet: UNet, text_encoder: TextEncoder, batch: Batch, sched: NoiseSchedule, gen: torch.Generator, empty_prob: float = 0.1) -> torch.Tensor:
    x0 = to_model_range(batch.images)
    t, eps = draw_noise(len(batch), x0.shape[1:], gen, sched.num_timesteps)
    drop = torch.rand(len(batch), generator=gen) < empty_prob
    captions = ["" if d else c for c, d in zip(batch.captions, drop.tolist())]
    cond = condition_from_captions(captions, None, text_encoder, 0)
    x_t = forward_noise(x0, t, eps, sched)
    return torch.mean((eps - unet(x_t, t, cond.values, cond.mask)) ** 2)


def pretrain_prior(
    examples: list[Example],
    text_encoder: TextEncoder,
    cfg: ModelConfig,
    steps: int = 3000,
    batch_size: int = 8,
    lr: float = 3e-4,
    seed: int = 0,
    min_scale: float = 0.85,
    progress: Callable[[int, float], None] | None = None,
) -> UNet:
    """Caption-conditioned denoiser trained on a broad pool, returned frozen."""
    torch.manual_seed(seed)
    unet = UNet(cfg.unet)
    sched = NoiseSchedule.linear()
    gen = torch.Generator().manual_seed(seed)
    stream = IndexStream(len(examples), gen)
    opt = torch.optim.Adam(unet.parameters(), lr=lr, betas=ADAM_BETAS)
    warmup = max(1, steps // 20)
    lr_at = lambda s: min(1.0, (s + 1) / warmup) * 0.5 * (1 + math.cos(math.pi * s / steps))  # noqa: E731
    sch = torch.optim.lr_scheduler.LambdaLR(opt, lr_at)
    with _accel.flush_denormals():
        for step in range(steps):
            batch = make_batch(examples, stream.take(batch_size), cfg.resolution, gen, min_scale)
            loss = prior_loss(unet, text_encoder, batch, sched, gen)
            if not torch.isfinite(loss):
                raise NonFiniteLoss(f"prior loss is {loss.item()} at step {step}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sch.step()
            if progress is not None:
                progress(step, loss.item())
    return frozen(unet)
