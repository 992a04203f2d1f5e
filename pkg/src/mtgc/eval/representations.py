"""Classical stand-ins for sparse guidance: a Canny-style sketch and a k-means colour map."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import zstandard
from scipy import ndimage
from scipy.cluster.vq import kmeans2, vq


def _gray(img: np.ndarray) -> np.ndarray:
    return 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]


def canny_edges(img: np.ndarray, sigma: float = 2.0, low: float = 0.05, high: float = 0.15) -> np.ndarray:
    """Binary edge map: Gaussian smoothing, Sobel gradients, non-maximum suppression, hysteresis.

    ``low``/``high`` are thresholds on the gradient magnitude relative to its maximum.
    """
    g = ndimage.gaussian_filter(_gray(np.asarray(img, dtype=np.float64)), sigma)
    gx = ndimage.sobel(g, axis=1)
    gy = ndimage.sobel(g, axis=0)
    mag = np.hypot(gx, gy)
    peak = mag.max()
    if peak <= 0:
        return np.zeros(mag.shape, dtype=bool)
    mag = mag / peak
    angle = (np.rad2deg(np.arctan2(gy, gx)) + 180.0) % 180.0
    sector = (np.floor((angle + 22.5) / 45.0).astype(int)) % 4
    offsets = {0: (0, 1), 1: (1, 1), 2: (1, 0), 3: (1, -1)}
    padded = np.pad(mag, 1)
    h, w = mag.shape
    keep = np.zeros_like(mag, dtype=bool)
    for s, (dy, dx) in offsets.items():
        fwd = padded[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]
        bwd = padded[1 - dy : 1 - dy + h, 1 - dx : 1 - dx + w]
        keep |= (sector == s) & (mag >= fwd) & (mag >= bwd)
    thin = mag * keep
    strong = thin >= high
    weak = thin >= low
    labels, n = ndimage.label(weak, structure=np.ones((3, 3)))
    if n == 0:
        return np.zeros_like(strong)
    has_strong = np.zeros(n + 1, dtype=bool)
    has_strong[np.unique(labels[strong])] = True
    has_strong[0] = False
    return has_strong[labels]


def sketch_image(img: np.ndarray, **kwargs) -> np.ndarray:
    """Edge map rendered as a 3-channel [0, 1] image (white strokes on black)."""
    edges = canny_edges(img, **kwargs).astype(np.float64)
    return np.repeat(edges[None], 3, axis=0)


def semantic_map(img: np.ndarray, k: int = 6, seed: int = 0, block: int = 1) -> np.ndarray:
    """k-means colour quantisation, optionally on a ``block``-downsampled grid, as a [0, 1] image."""
    arr = np.asarray(img, dtype=np.float64)
    c, h, w = arr.shape
    small = arr[:, ::block, ::block] if block > 1 else arr
    pixels = small.reshape(c, -1).T
    rng = np.random.default_rng(seed)
    fit = pixels[rng.choice(len(pixels), size=min(len(pixels), 4096), replace=False)]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # empty clusters on flat images are expected
        centroids, _ = kmeans2(fit, k, minit="++", seed=rng)
    labels, _ = vq(pixels, centroids)
    seg = centroids[labels].T.reshape(small.shape)
    if block > 1:
        seg = np.repeat(np.repeat(seg, block, axis=1), block, axis=2)[:, :h, :w]
    return np.clip(seg, 0.0, 1.0)


def lossless_bits(rep: np.ndarray) -> int:
    """Size of a representation coded as Zstandard over its 8-bit levels (bit-packed if binary)."""
    levels = np.clip(np.rint(rep * 255.0), 0, 255).astype(np.uint8)
    uniq = np.unique(levels)
    if uniq.size <= 2 and np.all(levels == levels[:1]):
        data = np.packbits(levels[0] > 0).tobytes()
    else:
        data = levels.tobytes()
    return 8 * len(zstandard.ZstdCompressor(level=19).compress(data))


@dataclass(frozen=True)
class Matched:
    image: np.ndarray
    bpp: float
    setting: tuple


SKETCH_GRID = tuple((s, lo, hi) for s in (1.0, 1.5, 2.0, 3.0, 4.0) for lo, hi in ((0.03, 0.1), (0.05, 0.15), (0.1, 0.3), (0.2, 0.45)))
SEMANTIC_GRID = tuple((k, b) for k in (2, 3, 4, 6, 8, 12, 16) for b in (1, 2, 4, 8))


def match_bpp(img: np.ndarray, target_bpp: float, kind: str, seed: int = 0) -> Matched:
    """Pick the generator setting whose lossless rate lies closest to ``target_bpp``."""
    px = img.shape[-2] * img.shape[-1]
    best = None
    if kind == "sketch":
        grid = SKETCH_GRID
        make = lambda s: sketch_image(img, sigma=s[0], low=s[1], high=s[2])  # noqa: E731
    elif kind == "semantic_map":
        grid = SEMANTIC_GRID
        make = lambda s: semantic_map(img, k=s[0], seed=seed, block=s[1])  # noqa: E731
    else:
        raise ValueError(f"unknown representation {kind!r}")
    for setting in grid:
        rep = make(setting)
        bpp = lossless_bits(rep) / px
        if best is None or abs(bpp - target_bpp) < abs(best.bpp - target_bpp):
            best = Matched(rep, bpp, setting)
    return best
