"""SPDT tensor files.

Layout: ``b"SPDT"``, little-endian u32 rank, ``rank`` u32 dims, then the
row-major little-endian float32 payload.
"""

from __future__ import annotations

import io
import os
import struct
from typing import BinaryIO

import numpy as np

from .tensor import Tensor

MAGIC = b"SPDT"


class FormatError(ValueError):
    """A file does not follow its declared binary/text layout."""


def _read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated file while reading {what}: wanted {n} bytes, got {len(buf)}")
    return buf


def write_tensor_to(f: BinaryIO, t: Tensor | np.ndarray) -> None:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    f.write(MAGIC)
    f.write(struct.pack("<I", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_tensor_from(f: BinaryIO) -> Tensor:
    magic = _read_exact(f, 4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    (rank,) = struct.unpack("<I", _read_exact(f, 4, "rank"))
    if rank > 8:
        raise FormatError(f"implausible tensor rank {rank}")
    dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, "dims"))
    count = int(np.prod(dims, dtype=np.int64))
    payload = _read_exact(f, 4 * count, "payload")
    arr = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)
    return Tensor(arr)


def save_tensor(t: Tensor | np.ndarray, path: str | os.PathLike) -> None:
    with open(path, "wb") as f:
        write_tensor_to(f, t)


def load_tensor(path: str | os.PathLike) -> Tensor:
    with open(path, "rb") as f:
        t = read_tensor_from(f)
        if f.read(1):
            raise FormatError(f"{path}: trailing bytes after tensor payload")
    return t


def tensor_bytes(t: Tensor | np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_tensor_to(buf, t)
    return buf.getvalue()
