"""Numba toggle for the hot scalar kernels.

Set ``MTGC_DISABLE_NUMBA=1`` to skip compilation. The range-coder kernels then
run their very same function bodies in the interpreter, so both paths produce
identical bytes; the pixel histogram falls back to ``numpy.bincount``.
"""

from __future__ import annotations

import contextlib
import os

import numpy as np
import torch

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("MTGC_DISABLE_NUMBA", "0") not in ("1", "true", "yes")


def jit(fn):
    """Compile ``fn`` with ``numba.njit`` when available, else return it untouched."""
    if not HAVE_NUMBA:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


def backend_name() -> str:
    return "numba" if USE_NUMBA else "python"


@contextlib.contextmanager
def flush_denormals():
    """Flush subnormal floats to zero for the duration (guards CPU slowdowns in training)."""
    np.finfo(np.float64).smallest_subnormal  # cache numpy's float limits before FTZ is enabled
    np.finfo(np.float32).smallest_subnormal
    enabled = torch.set_flush_denormal(True)
    try:
        yield enabled
    finally:
        torch.set_flush_denormal(False)
