"""Evaluation: fidelity metrics, entropy comparison, embedding distance, RD plots."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from mtgc.eval.embedding import CrossModalPair, cosine_distance, embedding_distance
from mtgc.eval.metrics import METRICS, PSNR_CAP_DB, ms_ssim, psnr, register_metric
from mtgc.eval.rd import MetricRecord, read_records, rd_plot, write_records
from mtgc.hci_codec.codec import image_entropy

__all__ = [
    "CrossModalPair",
    "METRICS",
    "MetricRecord",
    "PSNR_CAP_DB",
    "cosine_distance",
    "embedding_distance",
    "entropy_comparison",
    "image_entropy",
    "ms_ssim",
    "psnr",
    "rd_plot",
    "read_records",
    "register_metric",
    "write_records",
]


def entropy_comparison(
    corpus: list[np.ndarray],
    representations: Mapping[str, Callable[[int, np.ndarray], np.ndarray]],
) -> dict[str, float]:
    """Mean pixel entropy per representation over ``corpus``.

    Each generator is called as ``gen(index, image)`` and returns the
    representation image; matching bit rates is the generators' job.
    """
    if not corpus:
        raise ValueError("corpus is empty")
    table = {}
    for name, gen in representations.items():
        table[name] = float(np.mean([image_entropy(gen(i, img)) for i, img in enumerate(corpus)]))
    return table
