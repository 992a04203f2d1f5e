"""Metric records, CSV round-trips and rate-distortion plots."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from mtgc.errors import NotEnoughPoints  # noqa: E402

CSV_FIELDS = ("image_id", "method", "bpp", "psnr", "ms_ssim", "entropy")
AXIS_LABELS = {"psnr": "PSNR (dB)", "ms_ssim": "MS-SSIM", "entropy": "entropy (bits)"}


@dataclass(frozen=True)
class MetricRecord:
    image_id: str
    bpp: float
    psnr_db: float
    ms_ssim: float
    entropy_bits: float
    method: str = "mtgc"

    def __post_init__(self):
        if not 0.0 <= self.ms_ssim <= 1.0:
            raise ValueError(f"ms_ssim {self.ms_ssim} outside [0, 1]")

    def metric(self, name: str) -> float:
        return {"psnr": self.psnr_db, "ms_ssim": self.ms_ssim, "entropy": self.entropy_bits}[name]


def write_records(records: list[MetricRecord], path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_FIELDS)
        for r in records:
            w.writerow([r.image_id, r.method, repr(r.bpp), repr(r.psnr_db), repr(r.ms_ssim), repr(r.entropy_bits)])
    return path


def read_records(path: str | Path) -> list[MetricRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [
        MetricRecord(r["image_id"], float(r["bpp"]), float(r["psnr"]), float(r["ms_ssim"]), float(r["entropy"]), r["method"])
        for r in rows
    ]


def rd_plot(records: list[MetricRecord], out_path: str | Path, metric: str = "psnr") -> tuple[Path, Path]:
    """Write ``<out>.csv`` and a line plot (format from the suffix, SVG or PNG) of metric vs bpp.

    Each method becomes one curve, sorted by bpp, carrying the SVG id ``curve-<method>``.
    """
    if len(records) < 2:
        raise NotEnoughPoints(f"an RD curve needs at least 2 points, got {len(records)}")
    out_path = Path(out_path)
    csv_path = write_records(records, out_path.with_suffix(".csv"))
    methods = sorted({r.method for r in records})
    plt.rcParams["svg.hashsalt"] = "mtgc"
    fig, ax = plt.subplots(figsize=(5, 4))
    for m in methods:
        pts = sorted((r.bpp, r.metric(metric)) for r in records if r.method == m)
        (line,) = ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=m)
        line.set_gid(f"curve-{m}")
    ax.set_xlabel("bpp")
    ax.set_ylabel(AXIS_LABELS.get(metric, metric))
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    meta = {"Date": None} if out_path.suffix.lower() == ".svg" else {}
    fig.savefig(out_path, metadata=meta)
    plt.close(fig)
    return out_path, csv_path


def mean_curve(records: list[MetricRecord]) -> list[MetricRecord]:
    """Average the k-th lowest-rate point of every image, per method.

    Images with a different number of points than the majority of their method
    are skipped. Single-point inputs pass through unchanged.
    """
    by_method: dict[str, dict[str, list[MetricRecord]]] = {}
    for r in records:
        by_method.setdefault(r.method, {}).setdefault(r.image_id, []).append(r)
    out = []
    for method, per_image in sorted(by_method.items()):
        counts = [len(v) for v in per_image.values()]
        k = max(set(counts), key=counts.count)
        curves = [sorted(v, key=lambda r: r.bpp) for v in per_image.values() if len(v) == k]
        for rank in range(k):
            pts = [c[rank] for c in curves]
            n = len(pts)
            out.append(
                MetricRecord(
                    f"mean@{rank}",
                    sum(p.bpp for p in pts) / n,
                    sum(p.psnr_db for p in pts) / n,
                    sum(p.ms_ssim for p in pts) / n,
                    sum(p.entropy_bits for p in pts) / n,
                    method,
                )
            )
    return out
