"""The ``.mtgc`` wire format and exact bit accounting.

Layout (little-endian)::

    "MTGC" | u8 version | u32 image_h | u32 image_w | u8 lambda_index | u16 L | u16 D_text
    | u32 len_caption | u32 len_spw | u32 len_hci | caption | spw | hci | u32 crc32

The CRC (IEEE) covers every preceding byte. Version 1 implies Zstandard level 19
for the caption and SPW sections.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from fractions import Fraction

import zstandard

from mtgc.errors import BadMagic, ContainerError, CrcMismatch, SectionTooLarge, TruncatedContainer, VersionUnsupported

MAGIC = b"MTGC"
VERSION = 1
SUPPORTED_VERSIONS = (1,)
ZSTD_LEVEL_BY_VERSION = {1: 19}
HEADER = struct.Struct("<4sBIIBHHIII")
CRC = struct.Struct("<I")
FRAMING_BYTES = HEADER.size + CRC.size
MAX_SECTION = 0xFFFFFFFF


@dataclass(frozen=True)
class GuidancePayloads:
    caption: bytes
    spw: bytes
    hci: bytes


@dataclass(frozen=True)
class ContainerMeta:
    image_h: int
    image_w: int
    lambda_index: int
    L: int
    D_text: int
    version: int = VERSION

    def __post_init__(self):
        for name, value, hi in (
            ("image_h", self.image_h, 0xFFFFFFFF),
            ("image_w", self.image_w, 0xFFFFFFFF),
            ("lambda_index", self.lambda_index, 0xFF),
            ("L", self.L, 0xFFFF),
            ("D_text", self.D_text, 0xFFFF),
            ("version", self.version, 0xFF),
        ):
            if not 0 <= value <= hi:
                raise ValueError(f"{name}={value} does not fit its field")
        if self.image_h == 0 or self.image_w == 0:
            raise ValueError("image dimensions must be positive")

    @property
    def pixels(self) -> int:
        return self.image_h * self.image_w


def pack(payloads: GuidancePayloads, meta: ContainerMeta) -> bytes:
    sections = (payloads.caption, payloads.spw, payloads.hci)
    for name, sec in zip(("caption", "spw", "hci"), sections):
        if len(sec) > MAX_SECTION:
            raise SectionTooLarge(f"{name} section has {len(sec)} bytes, limit is {MAX_SECTION}")
    head = HEADER.pack(
        MAGIC, meta.version, meta.image_h, meta.image_w, meta.lambda_index, meta.L, meta.D_text,
        *(len(s) for s in sections),
    )
    body = head + b"".join(bytes(s) for s in sections)
    return body + CRC.pack(zlib.crc32(body))


def unpack(data: bytes) -> tuple[GuidancePayloads, ContainerMeta]:
    data = bytes(data)
    if len(data) < len(MAGIC) or data[: len(MAGIC)] != MAGIC:
        if len(data) < len(MAGIC) and MAGIC.startswith(data):
            raise TruncatedContainer("stream ends inside the magic")
        raise BadMagic("not an MTGC container")
    if len(data) < HEADER.size:
        raise TruncatedContainer("stream ends inside the header")
    _, version, h, w, lam, n_spw, d_text, n_cap, n_s, n_hci = HEADER.unpack_from(data)
    if version not in SUPPORTED_VERSIONS:
        raise VersionUnsupported(f"container version {version} is not supported")
    expected = HEADER.size + n_cap + n_s + n_hci + CRC.size
    if len(data) < expected:
        raise TruncatedContainer(f"expected {expected} bytes, got {len(data)}")
    if len(data) > expected:
        raise ContainerError(f"{len(data) - expected} trailing bytes after the checksum")
    (crc,) = CRC.unpack_from(data, expected - CRC.size)
    if zlib.crc32(data[: expected - CRC.size]) != crc:
        raise CrcMismatch("container checksum mismatch")
    a = HEADER.size
    b = a + n_cap
    c = b + n_s
    payloads = GuidancePayloads(data[a:b], data[b:c], data[c : c + n_hci])
    try:
        meta = ContainerMeta(h, w, lam, n_spw, d_text, version)
    except ValueError as exc:
        raise ContainerError(str(exc)) from exc
    return payloads, meta


@dataclass(frozen=True)
class BppReport:
    """Exact per-section rates as :class:`fractions.Fraction`.

    ``header_bpp`` counts the fixed framing (header and trailing CRC), which
    per-modality tables usually leave out. ``*_raw_bpp`` give the caption and SPW
    rates before Zstandard framing and compression.
    """

    caption_bpp: Fraction
    spw_bpp: Fraction
    hci_bpp: Fraction
    header_bpp: Fraction
    total_bpp: Fraction
    caption_raw_bpp: Fraction | None
    spw_raw_bpp: Fraction
    total_bits: int
    pixels: int

    def as_floats(self) -> dict[str, float]:
        keys = ("caption_bpp", "spw_bpp", "hci_bpp", "header_bpp", "total_bpp", "caption_raw_bpp", "spw_raw_bpp")
        return {k: float(getattr(self, k)) for k in keys if getattr(self, k) is not None}

    def lines(self) -> list[str]:
        f = self.as_floats()
        return [f"{k:>16s}: {v:.6f}" for k, v in f.items()] + [f"{'total_bits':>16s}: {self.total_bits}"]


def _caption_raw_bytes(section: bytes) -> int | None:
    if not section:
        return 0
    try:
        return len(zstandard.ZstdDecompressor().decompress(section))
    except zstandard.ZstdError:
        return None


def bpp_report(data: bytes, image_dims: tuple[int, int] | None = None) -> BppReport:
    payloads, meta = unpack(data)
    h, w = image_dims if image_dims is not None else (meta.image_h, meta.image_w)
    px = h * w
    caption_raw = _caption_raw_bytes(payloads.caption)
    bits = {
        "caption": 8 * len(payloads.caption),
        "spw": 8 * len(payloads.spw),
        "hci": 8 * len(payloads.hci),
        "header": 8 * FRAMING_BYTES,
    }
    total_bits = 8 * len(data)
    if sum(bits.values()) != total_bits:  # pragma: no cover - guaranteed by unpack
        raise ContainerError("section bits do not add up to the file size")
    return BppReport(
        caption_bpp=Fraction(bits["caption"], px),
        spw_bpp=Fraction(bits["spw"], px),
        hci_bpp=Fraction(bits["hci"], px),
        header_bpp=Fraction(bits["header"], px),
        total_bpp=Fraction(total_bits, px),
        caption_raw_bpp=None if caption_raw is None else Fraction(8 * caption_raw, px),
        spw_raw_bpp=Fraction(16 * meta.L * meta.D_text, px),
        total_bits=total_bits,
        pixels=px,
    )
