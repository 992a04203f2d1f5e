"""Caption guidance: acquisition from a captioner backend and lossless Zstd packing."""

from __future__ import annotations

import csv
import shlex
import subprocess
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from pathlib import Path

import zstandard

from mtgc.errors import CaptionTooLong, CorruptCaptionPayload, MissingFixtureCaption

MAX_CAPTION_WORDS = 20
ZSTD_LEVEL = 19
DEFAULT_PROMPT = (
    "Extract and concisely articulate the core, unambiguous semantic information of this "
    "image (main subject and context), in under 20 words."
)


class CaptionSource(str, Enum):
    FIXTURE = "fixture"
    EXTERNAL = "external_captioner"


@dataclass(frozen=True)
class Caption:
    text: str
    word_count: int
    source: CaptionSource = CaptionSource.FIXTURE

    @classmethod
    def from_text(cls, text: str, source: CaptionSource = CaptionSource.FIXTURE) -> "Caption":
        return cls(text=text, word_count=len(text.split()), source=source)


@dataclass(frozen=True)
class CaptionerSpec:
    """How captions are obtained.

    ``backend="external"`` runs ``external_command`` with the image path and the
    prompt appended as arguments and reads the caption from stdout.
    """

    prompt_template: str = DEFAULT_PROMPT
    backend: str = "fixture"
    fixture_path: str | None = None
    external_command: str | None = None
    max_words: int = MAX_CAPTION_WORDS
    truncate: bool = True
    allow_empty: bool = False
    zero_length: bool = False


def truncate_words(text: str, max_words: int) -> str:
    """Keep at most ``max_words`` whitespace-separated words; never cuts inside a word."""
    return " ".join(text.split()[:max_words])


@lru_cache(maxsize=16)
def _load_fixture(path: str) -> dict[str, str]:
    mapping: dict[str, str] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        for row in csv.reader(fh, delimiter="\t"):
            if not row or row[0].startswith("#"):
                continue
            mapping[row[0]] = row[1] if len(row) > 1 else ""
    return mapping


def load_fixture(path: str | Path) -> dict[str, str]:
    return dict(_load_fixture(str(Path(path).resolve())))


def _finalize(text: str, spec: CaptionerSpec, source: CaptionSource) -> Caption:
    text = " ".join(text.split())
    if len(text.split()) > spec.max_words:
        if not spec.truncate:
            raise CaptionTooLong(f"caption has {len(text.split())} words, limit is {spec.max_words}")
        text = truncate_words(text, spec.max_words)
    if not text and not (spec.allow_empty or spec.zero_length):
        raise ValueError("empty caption outside the zero-length ablation mode")
    return Caption.from_text(text, source)


def acquire_caption(image_id: str, spec: CaptionerSpec, image_path: str | Path | None = None) -> Caption:
    if spec.zero_length:
        return Caption("", 0, CaptionSource.FIXTURE if spec.backend == "fixture" else CaptionSource.EXTERNAL)
    if spec.backend == "fixture":
        if spec.fixture_path is None:
            raise MissingFixtureCaption("fixture backend needs a fixture_path")
        mapping = _load_fixture(str(Path(spec.fixture_path).resolve()))
        if image_id not in mapping:
            raise MissingFixtureCaption(f"no fixture caption for image id {image_id!r}")
        return _finalize(mapping[image_id], spec, CaptionSource.FIXTURE)
    if spec.backend == "external":
        if not spec.external_command or image_path is None:
            raise ValueError("external backend needs external_command and image_path")
        cmd = shlex.split(spec.external_command) + [str(image_path), spec.prompt_template]
        result = subprocess.run(cmd, capture_output=True, text=True, check=True)
        return _finalize(result.stdout, spec, CaptionSource.EXTERNAL)
    raise ValueError(f"unknown captioner backend {spec.backend!r}")


def compress_caption(caption: Caption | str, level: int = ZSTD_LEVEL) -> bytes:
    """One Zstandard frame holding the UTF-8 caption (content size and checksum included)."""
    text = caption.text if isinstance(caption, Caption) else caption
    cctx = zstandard.ZstdCompressor(level=level, write_checksum=True, write_content_size=True)
    return cctx.compress(text.encode("utf-8"))


def decompress_caption(payload: bytes) -> Caption:
    try:
        raw = zstandard.ZstdDecompressor().decompress(payload)
        text = raw.decode("utf-8")
    except (zstandard.ZstdError, UnicodeDecodeError) as exc:
        raise CorruptCaptionPayload(str(exc)) from exc
    return Caption.from_text(text)
