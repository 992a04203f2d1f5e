"""Procedural captioned scenes used as the desk-scale image corpus.

Scenes are described in normalised coordinates and rendered at any resolution,
so the same scene can feed the 512 px codec path and the 64 px diffusion path.
The caption is generated from the scene parameters, so it is truthful about
the image and stays under the 20-word limit.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

PALETTE = {
    "red": (0.85, 0.15, 0.12),
    "orange": (0.95, 0.55, 0.10),
    "yellow": (0.95, 0.85, 0.20),
    "green": (0.20, 0.65, 0.25),
    "teal": (0.10, 0.55, 0.55),
    "blue": (0.15, 0.30, 0.85),
    "purple": (0.50, 0.20, 0.65),
    "pink": (0.95, 0.55, 0.70),
    "brown": (0.50, 0.30, 0.15),
    "white": (0.95, 0.95, 0.92),
    "gray": (0.50, 0.50, 0.52),
    "black": (0.08, 0.08, 0.10),
}
SHAPES = ("circle", "square", "triangle", "diamond", "ring")
SIZES = {"small": 0.10, "medium": 0.17, "large": 0.26}
BACKGROUNDS = ("plain", "striped", "checkered", "gradient", "speckled")


@dataclass
class SceneObject:
    shape: str
    color: str
    size: str
    cx: float
    cy: float
    angle: float


@dataclass
class Scene:
    background: str
    bg_color: str
    bg_color2: str
    objects: list[SceneObject] = field(default_factory=list)
    texture_seed: int = 0
    light_dir: float = 0.0

    def caption(self, max_words: int = 20) -> str:
        bg = f"{self.bg_color} background" if self.background == "plain" else f"{self.background} {self.bg_color} background"
        # drop positions, then sizes, until the caption fits the word budget
        for detail in (2, 1, 0):
            parts = []
            for obj in self.objects:
                words = ["a"] + ([obj.size] if detail >= 1 else []) + [obj.color, obj.shape]
                if detail >= 2:
                    words.append(_where(obj.cx, obj.cy))
                parts.append(" ".join(words))
            objs = " and ".join(parts) if len(parts) < 3 else ", ".join(parts[:-1]) + " and " + parts[-1]
            text = f"{objs} on a {bg}"
            if len(text.split()) <= max_words:
                break
        return text


def _where(cx: float, cy: float) -> str:
    horiz = "left" if cx < 0.38 else "right" if cx > 0.62 else "center"
    vert = "top" if cy < 0.38 else "bottom" if cy > 0.62 else ""
    if horiz == "center" and not vert:
        return "in the middle"
    if horiz == "center":
        return f"at the {vert}"
    return f"at the {vert} {horiz}".replace("  ", " ") if vert else f"on the {horiz}"


def random_scene(rng: np.random.Generator) -> Scene:
    colors = list(PALETTE)
    bg_color, bg_color2 = rng.choice(colors, size=2, replace=False)
    scene = Scene(
        background=str(rng.choice(BACKGROUNDS)),
        bg_color=str(bg_color),
        bg_color2=str(bg_color2),
        texture_seed=int(rng.integers(0, 2**31 - 1)),
        light_dir=float(rng.uniform(0, 2 * np.pi)),
    )
    n_obj = int(rng.choice([1, 2, 3], p=[0.4, 0.4, 0.2]))
    for _ in range(n_obj):
        color = str(rng.choice([c for c in colors if c != scene.bg_color]))
        scene.objects.append(
            SceneObject(
                shape=str(rng.choice(SHAPES)),
                color=color,
                size=str(rng.choice(list(SIZES))),
                cx=float(rng.uniform(0.2, 0.8)),
                cy=float(rng.uniform(0.2, 0.8)),
                angle=float(rng.uniform(0, np.pi)),
            )
        )
    return scene


def _value_noise(seed: int, size: int, cells: int) -> np.ndarray:
    grid = np.random.default_rng(seed).standard_normal((cells + 1, cells + 1))
    t = np.linspace(0, cells, size, endpoint=False) + 0.5 * cells / size
    i = np.minimum(t.astype(int), cells - 1)
    f = t - i
    f = f * f * (3 - 2 * f)
    a = grid[i][:, i]
    b = grid[i][:, i + 1]
    c = grid[i + 1][:, i]
    d = grid[i + 1][:, i + 1]
    fy, fx = f[:, None], f[None, :]
    return (a * (1 - fx) + b * fx) * (1 - fy) + (c * (1 - fx) + d * fx) * fy


def _object_sdf(obj: SceneObject, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    r = SIZES[obj.size]
    dx, dy = x - obj.cx, y - obj.cy
    ca, sa = np.cos(obj.angle), np.sin(obj.angle)
    u, v = ca * dx + sa * dy, -sa * dx + ca * dy
    if obj.shape == "circle":
        return np.hypot(dx, dy) - r
    if obj.shape == "ring":
        return np.abs(np.hypot(dx, dy) - 0.75 * r) - 0.25 * r
    if obj.shape == "square":
        s = 0.8 * r
        return np.maximum(np.abs(u), np.abs(v)) - s
    if obj.shape == "diamond":
        return (np.abs(u) + np.abs(v)) / np.sqrt(2) - 0.75 * r
    # equilateral triangle
    k = np.sqrt(3.0)
    px, py = np.abs(u), v + 0.3 * r
    d1 = (k * px + py) / 2 - 0.6 * r
    return np.maximum(d1, -py - 0.6 * r / 2)


def render(scene: Scene, size: int) -> np.ndarray:
    """Render to a float32 ``(3, size, size)`` array in [0, 1]."""
    coords = (np.arange(size) + 0.5) / size
    y, x = np.meshgrid(coords, coords, indexing="ij")
    c1 = np.asarray(PALETTE[scene.bg_color])[:, None, None]
    c2 = np.asarray(PALETTE[scene.bg_color2])[:, None, None]
    if scene.background == "striped":
        m = (np.sin(2 * np.pi * 6 * (x * np.cos(scene.light_dir) + y * np.sin(scene.light_dir))) > 0).astype(float)
    elif scene.background == "checkered":
        m = ((np.floor(x * 8) + np.floor(y * 8)) % 2).astype(float)
    elif scene.background == "gradient":
        m = np.clip(x * np.cos(scene.light_dir) + y * np.sin(scene.light_dir), 0, 1)
    elif scene.background == "speckled":
        m = (_value_noise(scene.texture_seed + 7, size, 24) > 0.6).astype(float)
    else:
        m = np.zeros_like(x)
    mix = 0.35 if scene.background != "gradient" else 0.8
    img = c1 * (1 - mix * m) + c2 * (mix * m)
    px = 1.0 / size
    for obj in scene.objects:
        sdf = _object_sdf(obj, x, y)
        alpha = np.clip(0.5 - sdf / (1.5 * px), 0, 1)
        col = np.asarray(PALETTE[obj.color])[:, None, None]
        shade = 1.0 + 0.25 * ((x - obj.cx) * np.cos(scene.light_dir) + (y - obj.cy) * np.sin(scene.light_dir)) / SIZES[obj.size]
        img = img * (1 - alpha) + np.clip(col * shade, 0, 1) * alpha
    light = 1.0 + 0.12 * (x * np.cos(scene.light_dir) + y * np.sin(scene.light_dir) - 0.5)
    texture = 0.04 * _value_noise(scene.texture_seed, size, 16) + 0.015 * _value_noise(scene.texture_seed + 1, size, 64)
    img = img * light + texture
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def make_corpus(n: int, size: int, seed: int = 0) -> list[tuple[str, np.ndarray, str]]:
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        scene = random_scene(rng)
        out.append((f"scene{i:03d}", render(scene, size), scene.caption()))
    return out


def to_uint8(img: np.ndarray) -> np.ndarray:
    """``(3, H, W)`` float in [0, 1] -> ``(H, W, 3)`` uint8."""
    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    if arr.ndim == 2:
        arr = np.stack([arr] * 3, axis=-1)
    return (arr[..., :3].astype(np.float32) / 255.0).transpose(2, 0, 1)


def save_image(path: str | Path, img: np.ndarray) -> None:
    Image.fromarray(to_uint8(img)).save(path)


def load_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return from_uint8(np.asarray(im.convert("RGB")))


def write_fixture_set(out_dir: str | Path, n: int = 24, size: int = 512, seed: int = 0) -> Path:
    """Write ``images/<id>.png`` plus ``captions.tsv`` (``<id>\\t<caption>``)."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rows = []
    for image_id, img, caption in make_corpus(n, size, seed):
        save_image(out / "images" / f"{image_id}.png", img)
        rows.append((image_id, caption))
    with open(out / "captions.tsv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerows(rows)
    return out
