"""Binary PGM (P5) images, label maps and pair manifests."""

from __future__ import annotations

import os
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..images import SegmentationMap
from ..numerics.serialize import FormatError

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _parse_header(buf: bytes, path) -> tuple[int, int, int, int]:
    pos = 0
    fields = []
    for _ in range(4):
        m = _TOKEN.match(buf, pos)
        if m is None:
            raise FormatError(f"{path}: truncated PGM header")
        fields.append(m.group(1))
        pos = m.end()
    if fields[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (magic {fields[0][:8]!r})")
    try:
        width, height, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise FormatError(f"{path}: non-numeric PGM header field") from None
    if width <= 0 or height <= 0:
        raise FormatError(f"{path}: invalid PGM size {width}x{height}")
    if not 0 < maxval < 65536:
        raise FormatError(f"{path}: invalid PGM maxval {maxval}")
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise FormatError(f"{path}: missing whitespace after PGM header")
    return width, height, maxval, pos + 1


def read_pgm_raw(path: str | os.PathLike) -> tuple[np.ndarray, int]:
    """Integer samples and maxval, exactly as stored."""
    buf = Path(path).read_bytes()
    width, height, maxval, off = _parse_header(buf, path)
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = width * height * dtype.itemsize
    if len(buf) - off < need:
        raise FormatError(f"{path}: truncated PGM payload ({len(buf) - off} of {need} bytes)")
    data = np.frombuffer(buf, dtype=dtype, count=width * height, offset=off)
    return data.reshape(height, width).astype(np.uint16 if maxval > 255 else np.uint8), maxval


def write_pgm_raw(path: str | os.PathLike, samples: np.ndarray, maxval: int) -> None:
    samples = np.asarray(samples)
    if samples.ndim != 2:
        raise ValueError("PGM samples must be 2-D")
    if samples.min(initial=0) < 0 or samples.max(initial=0) > maxval:
        raise ValueError(f"samples outside 0..{maxval}")
    h, w = samples.shape
    dtype = ">u2" if maxval > 255 else "u1"
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n%d\n" % (w, h, maxval))
        f.write(samples.astype(dtype).tobytes())


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    """Gray image scaled to [0, 1] by the file's maxval."""
    samples, maxval = read_pgm_raw(path)
    return (samples.astype(np.float64) / maxval).astype(np.float32)


def write_pgm(path: str | os.PathLike, img: np.ndarray, bits: int = 16) -> None:
    """Quantize a [0, 1] image (values are clipped) to 8 or 16 bits."""
    if bits not in (8, 16):
        raise ValueError("bits must be 8 or 16")
    maxval = 255 if bits == 8 else 65535
    q = np.rint(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * maxval)
    write_pgm_raw(path, q.astype(np.uint16), maxval)


def read_label_pgm(path: str | os.PathLike, k: int | None = None) -> SegmentationMap:
    samples, maxval = read_pgm_raw(path)
    if maxval > 255:
        raise FormatError(f"{path}: label maps must be 8-bit")
    if k is not None and samples.max() >= k:
        raise FormatError(f"{path}: label {int(samples.max())} >= k={k}")
    return SegmentationMap.from_labels(samples.astype(np.int32))


def write_label_pgm(path: str | os.PathLike, seg: SegmentationMap) -> None:
    if seg.k > 256:
        raise ValueError("at most 256 regions fit in an 8-bit label map")
    write_pgm_raw(path, seg.labels.astype(np.uint8), 255)


@dataclass(frozen=True)
class ManifestEntry:
    degraded: Path
    reference: Path
    mask: Path | None = None


def read_manifest(path: str | os.PathLike) -> list[ManifestEntry]:
    """Lines of ``<degraded> <reference> [<mask>]``; relative paths resolve
    against the manifest's directory."""
    base = Path(path).parent
    entries = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) not in (2, 3):
            raise FormatError(f"{path}:{lineno}: expected 2 or 3 paths, got {len(parts)}")
        p = [base / q for q in parts]
        entries.append(ManifestEntry(p[0], p[1], p[2] if len(p) == 3 else None))
    return entries


def write_manifest(path: str | os.PathLike, entries: list[ManifestEntry]) -> None:
    base = Path(path).parent
    with open(path, "w", encoding="utf-8") as f:
        f.write("# degraded reference [mask]\n")
        for e in entries:
            cols = [e.degraded, e.reference] + ([e.mask] if e.mask is not None else [])
            f.write(" ".join(os.path.relpath(c, base) for c in cols) + "\n")
