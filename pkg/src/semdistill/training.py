"""Two-stage training: teacher pretraining with mask priors, then distillation
into the mask-free student."""

from __future__ import annotations

import csv
import logging
import math
import os
import time
import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .data import DegradationConfig, degrade, read_manifest, read_pgm, synth_scene
from .images import SegmentationMap
from .losses import FeatureExtractor, LossWeights, psnr_loss, scm_loss, skd_loss, total_loss
from .metrics import psnr, ssim
from .numerics import Adam, Tensor, detach, no_grad
from .prior import MaskProvider, cat_fuse, map_pool, provide_masks, quantile_regions, region_dropout, spi_fuse
from .restorers import RestorerConfig, StudentModel, TeacherModel, student_forward, teacher_encode, teacher_forward

log = logging.getLogger(__name__)

ABLATIONS = ("full", "no_scm", "no_skd", "cat_fusion", "spi_no_dropout")


@dataclass
class Sample:
    image_id: str
    degraded: np.ndarray
    reference: np.ndarray


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 8
    epochs_stage1: int = 60
    epochs_stage2: int = 60
    lambda1: float = 0.01
    lambda2: float = 100.0
    seed: int = 0
    ablation: str = "full"
    dropout_p: float = 0.5
    weight_decay: float = 0.0
    base_channels: int = 16
    depth: int = 4
    kernel_size: int = 3
    teacher_encoder_channels: int = 8
    scm_pooled: bool = False
    masks_from: str = "reference"
    teacher_grad: bool = False

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.epochs_stage1 < 0 or self.epochs_stage2 < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must be in [0, 1)")
        if self.masks_from not in ("reference", "student"):
            raise ValueError("masks_from must be 'reference' or 'student'")
        LossWeights(self.lambda1, self.lambda2)

    @property
    def restorer(self) -> RestorerConfig:
        return RestorerConfig(self.base_channels, self.depth, self.kernel_size, self.teacher_encoder_channels)

    @property
    def weights(self) -> LossWeights:
        """Effective loss weights after ablation switches."""
        l1 = 0.0 if self.ablation == "no_skd" else self.lambda1
        l2 = 0.0 if self.ablation == "no_scm" else self.lambda2
        return LossWeights(l1, l2)

    @property
    def fusion(self) -> str:
        return "cat" if self.ablation == "cat_fusion" else "spi"

    @property
    def effective_dropout(self) -> float:
        return 0.0 if self.ablation in ("spi_no_dropout", "cat_fusion") else self.dropout_p

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str, **overrides) -> "TrainConfig":
        return cls(**{**parse_config_text(text, cls), **overrides})


def parse_config_text(text: str, cls=TrainConfig) -> dict:
    """``key=value`` lines (``#`` comments) coerced to the dataclass field types."""
    types = {f.name: f.type for f in fields(cls)}
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        key, val = key.strip().replace("-", "_"), val.strip()
        if not sep or key not in types:
            raise ValueError(f"config line {lineno}: unknown or malformed entry {line!r}")
        t = types[key]
        if t in ("bool", bool):
            if val.lower() not in ("true", "false", "1", "0"):
                raise ValueError(f"config line {lineno}: {key} expects a boolean")
            out[key] = val.lower() in ("true", "1")
        elif t in ("int", int):
            out[key] = int(val)
        elif t in ("float", float):
            out[key] = float(val)
        else:
            out[key] = val
    return out


def desk_preset(**overrides) -> TrainConfig:
    """Small-scale settings for 64x64 synthetic data (20 epochs per stage)."""
    base = dict(epochs_stage1=20, epochs_stage2=20)
    base.update(overrides)
    return TrainConfig(**base)


def stream(seed: int, purpose: str) -> np.random.Generator:
    """Independent RNG per purpose so consumers cannot perturb each other."""
    return np.random.default_rng([int(seed), zlib.crc32(purpose.encode())])


# --- data -------------------------------------------------------------------

def make_synthetic_pairs(n: int = 200, size: int = 64, seed: int = 0, k: int = 7,
                         degradation: DegradationConfig = DegradationConfig()) -> tuple[list[Sample], list[SegmentationMap]]:
    """Degraded/clean pairs from procedural scenes, plus the scenes' own labels."""
    samples, labels = [], []
    for i in range(n):
        clean, seg = synth_scene(seed * 100_003 + i, size, size, k)
        lq = degrade(clean, replace(degradation, seed=seed * 100_003 + i + 7_919))
        samples.append(Sample(f"s{i:05d}", lq, clean))
        labels.append(seg)
    return samples, labels


def load_pairs(manifest: str | os.PathLike) -> tuple[list[Sample], dict[str, Path]]:
    """Samples from a manifest; image ids are reference file stems."""
    samples, masks = [], {}
    for e in read_manifest(manifest):
        lq, ref = read_pgm(e.degraded), read_pgm(e.reference)
        if lq.shape != ref.shape:
            raise ValueError(f"{e.degraded} and {e.reference} differ in size")
        image_id = e.reference.stem
        samples.append(Sample(image_id, lq, ref))
        if e.mask is not None:
            masks[image_id] = e.mask
    return samples, masks


def _stack(arrs: Iterable[np.ndarray]) -> np.ndarray:
    return np.stack([a[None] for a in arrs]).astype(np.float32)


def batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


# --- reports ----------------------------------------------------------------

@dataclass
class EpochRow:
    epoch: int
    train_loss: float
    val_psnr: float
    val_ssim: float
    seconds: float


@dataclass
class StepLog:
    recon: float
    skd: float
    scm: float
    total: float


@dataclass
class TrainReport:
    rows: list[EpochRow] = field(default_factory=list)
    steps: list[StepLog] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)

    def write_csv(self, path: str | os.PathLike, timing: bool = True) -> None:
        """``timing=False`` leaves the seconds column empty so reruns compare byte-for-byte."""
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_psnr", "val_ssim", "seconds"])
            for r in self.rows:
                w.writerow([r.epoch, f"{r.train_loss:.8f}", f"{r.val_psnr:.6f}", f"{r.val_ssim:.8f}",
                            f"{r.seconds:.3f}" if timing else ""])


# --- validation -------------------------------------------------------------

Restore = Callable[[np.ndarray, Sequence[Sample]], np.ndarray]


def validate(restore: Restore, split: Sequence[Sample], batch_size: int = 8) -> tuple[float, float]:
    """Mean PSNR/SSIM of clamped outputs against references."""
    if not split:
        raise ValueError("validation split is empty")
    ps, ss = [], []
    with no_grad():
        for i in range(0, len(split), batch_size):
            chunk = split[i:i + batch_size]
            out = np.clip(restore(_stack(s.degraded for s in chunk), chunk), 0.0, 1.0)
            for o, s in zip(out, chunk):
                ps.append(psnr(o[0], s.reference))
                ss.append(ssim(o[0], s.reference))
    return float(np.mean(ps)), float(np.mean(ss))


def identity_restorer(lq: np.ndarray, samples) -> np.ndarray:
    return lq


def student_restorer(m: StudentModel) -> Restore:
    return lambda lq, samples: student_forward(m, Tensor(lq)).data


def _teacher_output(m: TeacherModel, x: Tensor, maps) -> Tensor:
    if m.fusion == "spi":
        fused = spi_fuse(map_pool(teacher_encode(m, x), maps), x)
    else:
        fused = cat_fuse(maps, x, m.regions)
    return teacher_forward(m, fused)


def teacher_restorer(m: TeacherModel, provider: MaskProvider) -> Restore:
    def run(lq, samples):
        maps = [provide_masks(provider, s.image_id, s.reference) for s in samples]
        return _teacher_output(m, Tensor(lq), maps).data
    return run


# --- stage 1 ----------------------------------------------------------------

def pretrain_teacher(train: Sequence[Sample], provider: MaskProvider, cfg: TrainConfig,
                     val: Sequence[Sample] | None = None) -> tuple[TeacherModel, TrainReport]:
    """Fit the mask-guided teacher on degraded inputs with negative-PSNR loss."""
    if not train:
        raise ValueError("training set is empty")
    teacher = TeacherModel(cfg.restorer, seed=int(stream(cfg.seed, "teacher-init").integers(2**31)),
                           fusion=cfg.fusion, regions=provider.k)
    opt = Adam(teacher.trainable_parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    order_rng = stream(cfg.seed, "stage1-order")
    drop_rng = stream(cfg.seed, "stage1-dropout")
    p = cfg.effective_dropout
    report = TrainReport()
    for epoch in range(1, cfg.epochs_stage1 + 1):
        t0 = time.perf_counter()
        losses = []
        for idx in batches(len(train), cfg.batch_size, order_rng):
            chunk = [train[i] for i in idx]
            maps = [provide_masks(provider, s.image_id, s.reference) for s in chunk]
            if p > 0:
                maps = [region_dropout(m, p, drop_rng) for m in maps]
            x = Tensor(_stack(s.degraded for s in chunk))
            out = _teacher_output(teacher, x, maps)
            loss = psnr_loss(out, _stack(s.reference for s in chunk))
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
            report.steps.append(StepLog(loss.item(), 0.0, 0.0, loss.item()))
        vp, vs = validate(teacher_restorer(teacher, provider), val) if val else (math.nan, math.nan)
        report.rows.append(EpochRow(epoch, float(np.mean(losses)), vp, vs, time.perf_counter() - t0))
        log.info("stage1 epoch %d loss %.4f val psnr %.3f ssim %.4f", epoch, report.rows[-1].train_loss, vp, vs)
    return teacher, report


# --- stage 2 ----------------------------------------------------------------

def train_student(train: Sequence[Sample], provider: MaskProvider | None, teacher: TeacherModel | None,
                  cfg: TrainConfig, val: Sequence[Sample] | None = None,
                  phi: FeatureExtractor | None = None) -> tuple[StudentModel, TrainReport]:
    """Fit the student against references, distilling from the frozen teacher.

    ``teacher=None`` trains the plain reconstruction baseline.
    """
    if not train:
        raise ValueError("training set is empty")
    if teacher is not None and not teacher.frozen:
        raise RuntimeError("the teacher must be frozen before distillation")
    if teacher is not None and provider is None:
        raise ValueError("distillation needs a mask provider")
    student = StudentModel(cfg.restorer, seed=int(stream(cfg.seed, "student-init").integers(2**31)))
    opt = Adam(student.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    phi = phi or FeatureExtractor()
    w = cfg.weights
    order_rng = stream(cfg.seed, "stage2-order")
    report = TrainReport()
    for epoch in range(1, cfg.epochs_stage2 + 1):
        t0 = time.perf_counter()
        losses = []
        for idx in batches(len(train), cfg.batch_size, order_rng):
            chunk = [train[i] for i in idx]
            ref = _stack(s.reference for s in chunk)
            x = Tensor(_stack(s.degraded for s in chunk))
            out1 = student_forward(student, x)
            recon = psnr_loss(out1, ref)
            if teacher is None:
                loss = recon
                report.steps.append(StepLog(recon.item(), 0.0, 0.0, recon.item()))
            else:
                if cfg.masks_from == "reference":
                    maps = [provide_masks(provider, s.image_id, s.reference) for s in chunk]
                else:
                    maps = [quantile_regions(np.clip(o[0], 0, 1), provider.k) for o in out1.data]
                if cfg.teacher_grad:
                    out2 = _teacher_output(teacher, out1, maps)
                else:
                    with no_grad():
                        out2 = _teacher_output(teacher, detach(out1), maps)
                skd = _maybe_grad(w.skd > 0, lambda: skd_loss(out1, out2, detach_teacher=not cfg.teacher_grad))
                scm = _maybe_grad(w.scm > 0, lambda: scm_loss(out1, out2, maps, phi, pooled=cfg.scm_pooled,
                                                              detach_b=not cfg.teacher_grad))
                loss = total_loss(recon, skd, scm, w)
                report.steps.append(StepLog(recon.item(), skd.item(), scm.item(), loss.item()))
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        vp, vs = validate(student_restorer(student), val) if val else (math.nan, math.nan)
        report.rows.append(EpochRow(epoch, float(np.mean(losses)), vp, vs, time.perf_counter() - t0))
        log.info("stage2 epoch %d loss %.4f val psnr %.3f ssim %.4f", epoch, report.rows[-1].train_loss, vp, vs)
    return student, report


def _maybe_grad(enabled: bool, fn):
    if enabled:
        return fn()
    with no_grad():
        return fn()


def lambda_sweep(train: Sequence[Sample], provider: MaskProvider, teacher: TeacherModel, cfg: TrainConfig,
                 val: Sequence[Sample], lambda1_grid: Sequence[float] = (1e-4, 1e-3, 1e-2),
                 lambda2_grid: Sequence[float] = (10.0, 100.0, 1000.0)) -> list[tuple[float, float, float, float]]:
    """One student run per (lambda1, lambda2), all from the same seed."""
    rows = []
    for l1 in lambda1_grid:
        for l2 in lambda2_grid:
            student, _ = train_student(train, provider, teacher, replace(cfg, lambda1=l1, lambda2=l2), val=None)
            vp, vs = validate(student_restorer(student), val)
            rows.append((float(l1), float(l2), vp, vs))
            log.info("sweep lambda1=%g lambda2=%g psnr %.3f ssim %.4f", l1, l2, vp, vs)
    return rows


def best_of_sweep(rows):
    return max(rows, key=lambda r: (r[2], r[3]))


def write_sweep_csv(rows, path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["lambda1", "lambda2", "psnr", "ssim"])
        for l1, l2, p, s in rows:
            w.writerow([f"{l1:g}", f"{l2:g}", f"{p:.6f}", f"{s:.8f}"])
