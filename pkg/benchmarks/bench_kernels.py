"""Time the range coder and pixel histogram under numba and the pure fallback.

    python benchmarks/bench_kernels.py [--symbols N] [--repeat R]

Each backend runs in its own interpreter because the toggle is read at import.
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys

WORKER = r"""
import json, sys, time
import numpy as np
from mtgc import _accel
from mtgc.hci_codec import rangecoder as rc
from mtgc.hci_codec.codec import pixel_histogram

n, repeat = int(sys.argv[1]), int(sys.argv[2])
rng = np.random.default_rng(0)
side = int(np.sqrt(n // 16))
grid = np.clip(np.rint(rng.laplace(0, 2.0, size=(16, side, side))), -20, 20).astype(np.int64)
support = np.arange(-12, 13)
pmf = np.exp(-np.abs(support) / 2.0)
pmf /= pmf.sum()
tables = rc.build_tables([pmf] * 16, [-12] * 16, [1e-3] * 16)
pixels = rng.integers(0, 256, size=(3, 1024, 1024), dtype=np.uint8)

def best(fn):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)

data = rc.encode(grid, tables)
print(json.dumps({
    "backend": _accel.backend_name(),
    "symbols": int(grid.size),
    "bytes": len(data),
    "encode_s": best(lambda: rc.encode(grid, tables)),
    "decode_s": best(lambda: rc.decode(data, grid.shape, tables)),
    "histogram_s": best(lambda: pixel_histogram(pixels)),
}))
"""


def run(disable: bool, symbols: int, repeat: int) -> dict:
    env = dict(os.environ, MTGC_DISABLE_NUMBA="1" if disable else "0")
    out = subprocess.run([sys.executable, "-c", WORKER, str(symbols), str(repeat)], env=env, check=True, capture_output=True, text=True)
    return json.loads(out.stdout)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--symbols", type=int, default=16 * 64 * 64)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    rows = [run(False, args.symbols, args.repeat), run(True, args.symbols, args.repeat)]
    if rows[0]["bytes"] != rows[1]["bytes"]:
        raise SystemExit("backends disagree on the coded size")
    print(f"{'backend':>8s} {'symbols':>8s} {'encode ms':>10s} {'decode ms':>10s} {'hist ms':>8s}")
    for r in rows:
        print(f"{r['backend']:>8s} {r['symbols']:>8d} {1e3 * r['encode_s']:>10.2f} {1e3 * r['decode_s']:>10.2f} {1e3 * r['histogram_s']:>8.2f}")
    for key in ("encode_s", "decode_s", "histogram_s"):
        print(f"speedup {key[:-2]}: {rows[1][key] / rows[0][key]:.1f}x")


if __name__ == "__main__":
    main()
