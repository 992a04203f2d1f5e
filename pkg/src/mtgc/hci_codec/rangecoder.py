"""Range coding of integer latent grids against per-channel frequency tables."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mtgc import _accel
from mtgc.hci_codec import _kernels

PRECISION = _kernels.PRECISION
TOTAL = 1 << PRECISION
MAX_ABS_VALUE = (1 << 31) - 1

if _accel.HAVE_NUMBA:
    encode_symbols_nb = _accel.jit(_kernels.encode_symbols)
    decode_symbols_nb = _accel.jit(_kernels.decode_symbols)
else:  # pragma: no cover
    encode_symbols_nb = decode_symbols_nb = None


def _pick(name: str):
    if _accel.USE_NUMBA:
        return {"encode": encode_symbols_nb, "decode": decode_symbols_nb}[name]
    return {"encode": _kernels.encode_symbols, "decode": _kernels.decode_symbols}[name]


@dataclass(frozen=True)
class CdfTables:
    """Quantised cumulative tables, one row per latent channel.

    Row ``c`` holds ``cdf_len[c]`` valid entries: 0, ..., 2**16. Symbol ``j`` of the
    row stands for value ``offset[c] + j``; the last symbol is the escape.
    """

    cdf: np.ndarray
    cdf_len: np.ndarray
    offset: np.ndarray

    @property
    def channels(self) -> int:
        return int(self.cdf.shape[0])

    def freq(self, c: int) -> np.ndarray:
        n = int(self.cdf_len[c])
        return np.diff(self.cdf[c, :n])

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {"cdf": self.cdf, "cdf_len": self.cdf_len, "offset": self.offset}

    @classmethod
    def from_arrays(cls, cdf, cdf_len, offset) -> "CdfTables":
        return cls(
            np.ascontiguousarray(cdf, dtype=np.int64),
            np.ascontiguousarray(cdf_len, dtype=np.int64),
            np.ascontiguousarray(offset, dtype=np.int64),
        )


def quantize_pmf(pmf: np.ndarray, escape_mass: float) -> np.ndarray:
    """Turn a pmf (plus escape probability) into integer frequencies summing to 2**16.

    Every symbol, the escape included, gets a frequency of at least 1.
    """
    p = np.concatenate([np.asarray(pmf, dtype=np.float64), [max(float(escape_mass), 0.0)]])
    p = np.clip(p, 0.0, None)
    if p.sum() <= 0:
        p = np.ones_like(p)
    p = p / p.sum()
    if p.size > TOTAL:
        raise ValueError("alphabet larger than the table precision allows")
    freq = np.maximum(np.round(p * TOTAL).astype(np.int64), 1)
    excess = int(freq.sum()) - TOTAL
    # settle the rounding error on the largest entries, never going below 1
    while excess != 0:
        order = np.argsort(-freq, kind="stable")
        for j in order:
            if excess > 0 and freq[j] > 1:
                take = min(excess, int(freq[j]) - 1)
                freq[j] -= take
                excess -= take
            elif excess < 0:
                freq[j] -= excess
                excess = 0
            if excess == 0:
                break
    return freq


def build_tables(pmfs: list[np.ndarray], offsets: list[int], escape_masses: list[float]) -> CdfTables:
    rows = [quantize_pmf(p, e) for p, e in zip(pmfs, escape_masses)]
    width = max(len(r) for r in rows) + 1
    cdf = np.zeros((len(rows), width), dtype=np.int64)
    lens = np.zeros(len(rows), dtype=np.int64)
    for c, freq in enumerate(rows):
        cdf[c, 1 : len(freq) + 1] = np.cumsum(freq)
        lens[c] = len(freq) + 1
    return CdfTables.from_arrays(cdf, lens, np.asarray(offsets, dtype=np.int64))


def _check(values: np.ndarray, tables: CdfTables) -> np.ndarray:
    if values.ndim != 3 or values.shape[0] != tables.channels:
        raise ValueError(f"expected a ({tables.channels}, h, w) grid, got {values.shape}")
    v = np.ascontiguousarray(values, dtype=np.int64)
    if v.size and int(np.abs(v).max()) > MAX_ABS_VALUE:
        raise ValueError("latent values must fit in 32 bits")
    return v


def encode(values: np.ndarray, tables: CdfTables) -> bytes:
    """Range-code a ``(C, h, w)`` integer grid. Output carries no length or shape."""
    v = _check(values, tables)
    flat = v.reshape(-1)
    hw = max(v.shape[1] * v.shape[2], 1)
    out = np.zeros(flat.size * 12 + 64, dtype=np.uint8)
    n = _pick("encode")(flat, hw, tables.cdf, tables.cdf_len, tables.offset, out)
    raw = out[:n]
    if n and raw[0] != 0:  # pragma: no cover - guarded by construction
        raise AssertionError("range coder produced a nonzero lead byte")
    return bytes(raw[1:]).rstrip(b"\x00")


def decode(data: bytes, shape: tuple[int, int, int], tables: CdfTables) -> np.ndarray:
    """Inverse of :func:`encode`. Raises ``ValueError`` on an undecodable stream."""
    c, h, w = shape
    if c != tables.channels:
        raise ValueError("channel count does not match the tables")
    # widened so the interpreted kernel does not wrap at uint8
    buf = np.frombuffer(data, dtype=np.uint8).astype(np.int64)
    out = np.zeros(c * h * w, dtype=np.int64)
    status = _pick("decode")(buf, out.size, max(h * w, 1), tables.cdf, tables.cdf_len, tables.offset, out)
    if status != 0:
        raise ValueError("range-coded stream is inconsistent with the tables")
    return out.reshape(shape)


def model_bits(values: np.ndarray, tables: CdfTables) -> float:
    """Exact information content of ``values`` under ``tables``, in bits.

    Includes the fixed-length fields spent on escaped values.
    """
    v = _check(values, tables)
    total = 0.0
    for c in range(tables.channels):
        freq = tables.freq(c)
        esc = len(freq) - 1
        idx = v[c].reshape(-1) - tables.offset[c]
        inside = (idx >= 0) & (idx < esc)
        total += float(np.sum(PRECISION - np.log2(freq[idx[inside]])))
        outside = v[c].reshape(-1)[~inside]
        if outside.size:
            u = np.where(outside >= 0, outside * 2, -outside * 2 - 1)
            nbits = np.array([int(x).bit_length() for x in u])
            chunks = (nbits + 15) // 16
            total += outside.size * (PRECISION - np.log2(freq[esc]) + _kernels.NBITS_FIELD)
            total += float(chunks.sum() * _kernels.CHUNK_BITS)
    return total
