"""Residual CNN restorers and their checkpoint files.

The student maps a degraded image to a restored one on its own.  The
teacher has an encoder (whose features get mask-pooled outside this module)
and a body that consumes the fused input.  Both are residual: the last conv
is zero-initialized, so a fresh model is the identity on its image channel.

This module depends on :mod:`.numerics` only, so inference with a student
checkpoint never touches masks, teachers or feature extractors.
"""

from __future__ import annotations

import io
import os
import struct
from dataclasses import asdict, dataclass
from typing import BinaryIO, Iterator

import numpy as np

from .numerics import Parameter, ShapeError, Tensor, add, conv2d, relu, slice_channels
from .numerics.serialize import FormatError, read_tensor_from, write_tensor_to

CHECKPOINT_MAGIC = b"SPDC"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class RestorerConfig:
    base_channels: int = 16
    depth: int = 4
    kernel_size: int = 3
    teacher_encoder_channels: int = 8

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")
        if self.base_channels < 1 or self.teacher_encoder_channels < 1:
            raise ValueError("channel counts must be positive")


def _he_conv(rng: np.random.Generator, out_ch: int, in_ch: int, k: int, zero: bool = False):
    if zero:
        w = np.zeros((out_ch, in_ch, k, k), dtype=np.float32)
    else:
        std = np.sqrt(2.0 / (in_ch * k * k))
        w = (rng.standard_normal((out_ch, in_ch, k, k)) * std).astype(np.float32)
    return w, np.zeros(out_ch, dtype=np.float32)


class _ConvNet:
    kind = ""

    def __init__(self):
        self.params: dict[str, Parameter] = {}

    def _add_conv(self, name: str, wb) -> None:
        w, b = wb
        self.params[f"{name}.weight"] = Parameter(w, f"{self.kind}.{name}.weight")
        self.params[f"{name}.bias"] = Parameter(b, f"{self.kind}.{name}.bias")

    def _conv(self, name: str, x: Tensor) -> Tensor:
        return conv2d(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"])

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def named_arrays(self) -> Iterator[tuple[str, np.ndarray]]:
        for name, p in self.params.items():
            yield name, p.data

    def astype(self, dtype):
        """Copy with every parameter converted (float64 for gradient checks)."""
        clone = self._empty_like()
        for name, p in self.params.items():
            clone.params[name] = Parameter(p.data.astype(dtype), p.name, frozen=p.frozen)
        return clone

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def descriptor(self) -> dict[str, str]:
        d = {"kind": self.kind}
        d.update({key: str(val) for key, val in asdict(self.config).items()})
        return d

    def _empty_like(self):
        raise NotImplementedError


class StudentModel(_ConvNet):
    """Single-channel residual restorer used alone at inference."""

    kind = "student"

    def __init__(self, config: RestorerConfig = RestorerConfig(), seed: int = 0):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(seed)
        c, k = config.base_channels, config.kernel_size
        for i in range(config.depth):
            self._add_conv(f"conv{i}", _he_conv(rng, c, 1 if i == 0 else c, k))
        self._add_conv("out", _he_conv(rng, 1, c, k, zero=True))

    def _empty_like(self):
        return StudentModel(self.config)

    def __call__(self, x: Tensor) -> Tensor:
        return student_forward(self, x)


def student_forward(m: StudentModel, x: Tensor) -> Tensor:
    if x.ndim != 4 or x.shape[1] != 1:
        raise ShapeError(f"student expects (N, 1, H, W) input, got {x.shape}")
    h = x
    for i in range(m.config.depth):
        h = relu(m._conv(f"conv{i}", h))
    return add(x, m._conv("out", h))


class TeacherModel(_ConvNet):
    """Mask-guided restorer: encoder plus residual body.

    ``fusion="spi"`` expects ``teacher_encoder_channels + 1`` input channels,
    ``fusion="cat"`` expects ``regions + 1``.  The image is the last channel.
    """

    kind = "teacher"

    def __init__(self, config: RestorerConfig = RestorerConfig(), seed: int = 0,
                 fusion: str = "spi", regions: int = 7):
        super().__init__()
        if fusion not in ("spi", "cat"):
            raise ValueError(f"unknown fusion mode {fusion!r}")
        self.config = config
        self.fusion = fusion
        self.regions = int(regions)
        self.frozen = False
        rng = np.random.default_rng(seed)
        c, e, k = config.base_channels, config.teacher_encoder_channels, config.kernel_size
        self._add_conv("enc0", _he_conv(rng, c, 1, k))
        self._add_conv("enc1", _he_conv(rng, e, c, k))
        for i in range(config.depth):
            self._add_conv(f"body{i}", _he_conv(rng, c, self.in_channels if i == 0 else c, k))
        self._add_conv("out", _he_conv(rng, 1, c, k, zero=True))

    @property
    def in_channels(self) -> int:
        extra = self.config.teacher_encoder_channels if self.fusion == "spi" else self.regions
        return extra + 1

    def encoder_parameters(self) -> list[Parameter]:
        return [p for n, p in self.params.items() if n.startswith("enc")]

    def body_parameters(self) -> list[Parameter]:
        return [p for n, p in self.params.items() if not n.startswith("enc")]

    def trainable_parameters(self) -> list[Parameter]:
        """Encoder is unused under CAT fusion."""
        return self.parameters() if self.fusion == "spi" else self.body_parameters()

    def freeze(self) -> "TeacherModel":
        for p in self.params.values():
            p.frozen = True
        self.frozen = True
        return self

    def astype(self, dtype):
        clone = super().astype(dtype)
        clone.frozen = self.frozen
        return clone

    def descriptor(self) -> dict[str, str]:
        d = super().descriptor()
        d["fusion"] = self.fusion
        d["regions"] = str(self.regions)
        return d

    def _empty_like(self):
        return TeacherModel(self.config, fusion=self.fusion, regions=self.regions)


def teacher_encode(m: TeacherModel, x: Tensor) -> Tensor:
    if x.ndim != 4 or x.shape[1] != 1:
        raise ShapeError(f"teacher encoder expects (N, 1, H, W) input, got {x.shape}")
    return m._conv("enc1", relu(m._conv("enc0", x)))


def teacher_forward(m: TeacherModel, fused: Tensor) -> Tensor:
    if fused.ndim != 4 or fused.shape[1] != m.in_channels:
        raise ShapeError(
            f"teacher ({m.fusion} fusion) expects {m.in_channels} input channels, got shape {fused.shape}")
    h = fused
    for i in range(m.config.depth):
        h = relu(m._conv(f"body{i}", h))
    c = fused.shape[1]
    return add(slice_channels(fused, c - 1, c), m._conv("out", h))


# --- checkpoints ------------------------------------------------------------

class CheckpointError(FormatError):
    pass


def _write_descriptor(f: BinaryIO, desc: dict[str, str]) -> None:
    for key, val in desc.items():
        if "=" in key or "\n" in key or "\n" in val:
            raise ValueError(f"descriptor entry {key!r} cannot be encoded")
        f.write(f"{key}={val}\n".encode("utf-8"))
    f.write(b"\n")


def _read_descriptor(f: BinaryIO) -> dict[str, str]:
    desc = {}
    while True:
        line = f.readline()
        if not line:
            raise CheckpointError("truncated checkpoint: descriptor block not terminated")
        text = line.decode("utf-8", errors="replace").rstrip("\n")
        if not text:
            return desc
        key, sep, val = text.partition("=")
        if not sep:
            raise CheckpointError(f"malformed descriptor line {text!r}")
        desc[key] = val


def checkpoint_bytes(m: StudentModel | TeacherModel) -> bytes:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    desc = m.descriptor()
    desc["tensors"] = str(len(m.params))
    _write_descriptor(buf, desc)
    for name, arr in m.named_arrays():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        write_tensor_to(buf, arr)
    return buf.getvalue()


def save_checkpoint(m: StudentModel | TeacherModel, path: str | os.PathLike) -> None:
    with open(path, "wb") as f:
        f.write(checkpoint_bytes(m))


def _model_from_descriptor(desc: dict[str, str]):
    try:
        cfg = RestorerConfig(
            base_channels=int(desc["base_channels"]),
            depth=int(desc["depth"]),
            kernel_size=int(desc["kernel_size"]),
            teacher_encoder_channels=int(desc["teacher_encoder_channels"]),
        )
        kind = desc["kind"]
        if kind == "student":
            return StudentModel(cfg)
        if kind == "teacher":
            return TeacherModel(cfg, fusion=desc["fusion"], regions=int(desc["regions"]))
    except KeyError as exc:
        raise CheckpointError(f"descriptor is missing key {exc.args[0]!r}") from None
    except ValueError as exc:
        raise CheckpointError(f"invalid descriptor: {exc}") from None
    raise CheckpointError(f"unknown model kind {kind!r}")


def read_checkpoint(f: BinaryIO, expect: str | None = None):
    magic = f.read(4)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    raw = f.read(4)
    if len(raw) != 4:
        raise CheckpointError("truncated checkpoint: missing version")
    (version,) = struct.unpack("<I", raw)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})")
    desc = _read_descriptor(f)
    if expect is not None and desc.get("kind") != expect:
        raise CheckpointError(f"checkpoint holds a {desc.get('kind')!r} model, expected {expect!r}")
    model = _model_from_descriptor(desc)
    try:
        n_expected = int(desc.get("tensors", len(model.params)))
    except ValueError:
        raise CheckpointError(f"invalid tensor count {desc['tensors']!r}") from None
    seen = set()
    for _ in range(n_expected):
        raw = f.read(4)
        if len(raw) != 4:
            raise CheckpointError(f"truncated checkpoint: {len(seen)} of {n_expected} tensors present")
        (n,) = struct.unpack("<I", raw)
        if n > 1024:
            raise CheckpointError(f"implausible tensor name length {n}")
        name_raw = f.read(n)
        if len(name_raw) != n:
            raise CheckpointError("truncated checkpoint inside a tensor name")
        name = name_raw.decode("utf-8", errors="replace")
        if name not in model.params:
            raise CheckpointError(f"unexpected tensor {name!r} for a {model.kind} model")
        try:
            t = read_tensor_from(f)
        except FormatError as exc:
            raise CheckpointError(f"tensor {name!r}: {exc}") from None
        p = model.params[name]
        if t.shape != p.shape:
            raise CheckpointError(f"tensor {name!r} has shape {t.shape}, architecture expects {p.shape}")
        p.data[...] = t.data
        seen.add(name)
    missing = set(model.params) - seen
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors {sorted(missing)}")
    if f.read(1):
        raise CheckpointError("trailing bytes after the last tensor")
    return model


def load_checkpoint(path: str | os.PathLike, expect: str | None = None):
    with open(path, "rb") as f:
        return read_checkpoint(f, expect)
