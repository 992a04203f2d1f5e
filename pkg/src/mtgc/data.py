"""Captioned image sets and deterministic crop-and-resize batching."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from mtgc.layers import interpolate_bilinear
from mtgc.toydata import load_image


@dataclass
class Example:
    image_id: str
    image: torch.Tensor  # [3, H, W] in [0, 1]
    caption: str
    hci: torch.Tensor | None = None  # decoded HCI at the image's own size


@dataclass
class Batch:
    images: torch.Tensor  # [B, 3, R, R]
    captions: list[str]
    hci: torch.Tensor | None = None  # [B, 3, R, R]
    ids: list[str] | None = None

    def __len__(self) -> int:
        return self.images.shape[0]


def load_captioned_dir(root: str | Path, limit: int | None = None) -> list[Example]:
    """Read ``captions.tsv`` (``id<TAB>caption``) and ``images/<id>.png`` under ``root``."""
    root = Path(root)
    rows = []
    with open(root / "captions.tsv", encoding="utf-8", newline="") as fh:
        for row in csv.reader(fh, delimiter="\t"):
            if row and not row[0].startswith("#"):
                rows.append((row[0], row[1] if len(row) > 1 else ""))
    rows = rows[:limit] if limit is not None else rows
    return [Example(i, torch.from_numpy(load_image(root / "images" / f"{i}.png")), c) for i, c in rows]


def crop_resize(img: torch.Tensor, box: tuple[int, int, int], resolution: int) -> torch.Tensor:
    y, x, side = box
    return interpolate_bilinear(img[None, :, y : y + side, x : x + side], resolution)[0]


def random_box(h: int, w: int, min_scale: float, gen: torch.Generator) -> tuple[int, int, int]:
    """Random square ``(y, x, side)`` whose side is a ``[min_scale, 1]`` fraction of the short edge."""
    short = min(h, w)
    lo = max(1, int(np.ceil(min_scale * short)))
    side = int(torch.randint(lo, short + 1, (1,), generator=gen))
    y = int(torch.randint(0, h - side + 1, (1,), generator=gen))
    x = int(torch.randint(0, w - side + 1, (1,), generator=gen))
    return y, x, side


def full_box(img: torch.Tensor) -> tuple[int, int, int]:
    h, w = img.shape[-2:]
    side = min(h, w)
    return (h - side) // 2, (w - side) // 2, side


def make_batch(
    examples: list[Example],
    indices: list[int],
    resolution: int,
    gen: torch.Generator | None = None,
    min_scale: float = 1.0,
) -> Batch:
    """Crop the same square from each image and its HCI, then resize both.

    With ``gen=None`` the central full square is used (evaluation mode).
    """
    imgs, hcis = [], []
    for i in indices:
        ex = examples[i]
        h, w = ex.image.shape[-2:]
        box = random_box(h, w, min_scale, gen) if gen is not None else full_box(ex.image)
        imgs.append(crop_resize(ex.image, box, resolution))
        if ex.hci is not None:
            hcis.append(crop_resize(ex.hci, box, resolution))
    hci = torch.stack(hcis) if len(hcis) == len(indices) and hcis else None
    return Batch(torch.stack(imgs), [examples[i].caption for i in indices], hci, [examples[i].image_id for i in indices])


class IndexStream:
    """Endless epoch-wise shuffled indices drawn from one generator."""

    def __init__(self, n: int, gen: torch.Generator):
        if n <= 0:
            raise ValueError("dataset is empty")
        self.n = n
        self.gen = gen
        self.queue: list[int] = []

    def take(self, k: int) -> list[int]:
        out = []
        while len(out) < k:
            if not self.queue:
                self.queue = torch.randperm(self.n, generator=self.gen).tolist()
            out.append(self.queue.pop(0))
        return out
