"""Run configuration: built-in defaults < JSON file < command-line flags."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from mtgc.errors import ConfigError

LAMBDA_BY_INDEX = {1: 1e-4, 2: 2e-4, 3: 3e-4}


def cache_root() -> Path:
    return Path(os.environ.get("MTGC_CACHE", Path.home() / ".cache" / "mtgc"))


@dataclass(frozen=True)
class RunConfig:
    resolution: int = 64
    image_size: int = 1024
    lambda_index: int = 2
    L: int = 1
    D_text: int = 256
    seed: int = 0
    steps: int = 50
    fixture_dir: str | None = None
    checkpoint_dir: str | None = None
    # base-model pretraining
    num_fixtures: int = 8
    pool_size: int = 400
    pool_image_size: int = 128
    codec_steps: int = 4000
    vit_steps: int = 600
    prior_steps: int = 3000
    # guided stages
    stage_steps: tuple[int, int, int] = (2000, 2000, 200)
    batch_size: int = 8
    min_crop_scale: float = 0.85
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lambda_index not in LAMBDA_BY_INDEX:
            raise ConfigError(f"lambda_index must be 1, 2 or 3, got {self.lambda_index}")
        if self.L < 0 or self.D_text <= 0 or self.resolution <= 0:
            raise ConfigError("L must be >= 0 and D_text, resolution positive")
        if self.resolution % 4:
            raise ConfigError("resolution must be a multiple of 4")
        if len(tuple(self.stage_steps)) != 3:
            raise ConfigError("stage_steps needs one entry per stage")
        if not 1 <= self.steps <= 1000:
            raise ConfigError("steps must lie in [1, 1000]")

    @property
    def lambda_rd(self) -> float:
        return LAMBDA_BY_INDEX[self.lambda_index]

    @property
    def fixtures(self) -> Path:
        return Path(self.fixture_dir) if self.fixture_dir else cache_root() / "fixtures"

    @property
    def checkpoints(self) -> Path:
        return Path(self.checkpoint_dir) if self.checkpoint_dir else cache_root() / "checkpoints"

    def codec_path(self, lambda_index: int | None = None) -> Path:
        return self.checkpoints / f"codec_lambda{lambda_index or self.lambda_index}.pt"

    def base_path(self) -> Path:
        return self.checkpoints / "base.pt"

    def stage_path(self, stage: int) -> Path:
        return self.checkpoints / f"stage{stage}_lambda{self.lambda_index}.pt"

    def log_path(self, stage: int) -> Path:
        return self.checkpoints / f"loss_stage{stage}_lambda{self.lambda_index}.csv"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_steps"] = list(self.stage_steps)
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


_FIELD_NAMES = {f.name for f in fields(RunConfig)}


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    """Merge a JSON file and explicit overrides (``None`` values are ignored) over defaults."""
    cfg = RunConfig()
    merged: dict = {}
    if path is not None:
        try:
            merged.update(json.loads(Path(path).read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    merged.update({k: v for k, v in (overrides or {}).items() if v is not None})
    unknown = set(merged) - _FIELD_NAMES
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "stage_steps" in merged:
        merged["stage_steps"] = tuple(merged["stage_steps"])
    try:
        return replace(cfg, **merged)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
