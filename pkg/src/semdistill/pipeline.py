"""End-to-end desk-scale run: data, teacher, two students, evaluation.

Everything lands under one work directory.  CSV reports carry no wall-clock
values so two runs with the same seed compare byte-for-byte; timings go to
``timings.log`` instead.
"""

from __future__ import annotations

import csv
import logging
import os
import shutil
import subprocess
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import (DegradationConfig, ManifestEntry, SplitSpec, degrade, split_dataset, synth_scene, write_label_pgm,
                   write_manifest, write_pgm)
from .losses import FeatureExtractor
from .metrics import evaluate_dirs
from .numerics import no_grad
from .prior import MaskProvider, provide_masks
from .restorers import save_checkpoint
from .training import (TrainConfig, TrainReport, desk_preset, identity_restorer, load_pairs, pretrain_teacher,
                       teacher_restorer, train_student, validate)

log = logging.getLogger(__name__)

COMPARISON_ROWS = ("input", "baseline_student", "distilled_student", "teacher")

# Modules the inference subprocess must not be able to import.
_TRAINING_ONLY = ("semdistill.prior", "semdistill.losses", "semdistill.training")


@dataclass
class DemoResult:
    workdir: Path
    comparison: list[tuple[str, float, float]]
    input_val_psnr: float
    stage1: TrainReport
    full: TrainReport
    baseline: TrainReport
    purity_ok: bool
    frozen_ok: bool
    timings: dict[str, float] = field(default_factory=dict)

    @property
    def teacher_gain_db(self) -> float:
        return self.stage1.rows[-1].val_psnr - self.input_val_psnr

    @property
    def distill_gain_db(self) -> float:
        return self.full.rows[-1].val_psnr - self.baseline.rows[-1].val_psnr


def write_dataset(root: Path, n: int, size: int, seed: int, k: int = 7,
                  degradation: DegradationConfig = DegradationConfig()) -> Path:
    """Clean/degraded PGM pairs, their label maps and a manifest; returns the manifest path."""
    provider = MaskProvider("synthetic", k)
    for sub in ("clean", "degraded", "masks"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(n):
        name = f"s{i:05d}.pgm"
        clean, _ = synth_scene(seed * 100_003 + i, size, size, k)
        lq = degrade(clean, replace(degradation, seed=seed * 100_003 + i + 7_919))
        write_pgm(root / "clean" / name, clean, bits=16)
        write_pgm(root / "degraded" / name, lq, bits=16)
        write_label_pgm(root / "masks" / name, provide_masks(provider, name[:-4], clean))
        entries.append(ManifestEntry(root / "degraded" / name, root / "clean" / name, root / "masks" / name))
    manifest = root / "pairs.txt"
    write_manifest(manifest, entries)
    return manifest


def _snapshot_equal(a: dict, b: dict) -> bool:
    return a.keys() == b.keys() and all(np.array_equal(a[n], b[n]) for n in a)


def _infer_subprocess(model: Path, src: Path, out: Path) -> subprocess.CompletedProcess:
    blocker = "".join(f"sys.modules[{m!r}] = None; " for m in _TRAINING_ONLY)
    code = f"import sys; {blocker}from semdistill.cli import run; sys.exit(run(sys.argv[1:]))"
    env = dict(os.environ)
    pkg_root = str(Path(__file__).resolve().parents[1])
    env["PYTHONPATH"] = pkg_root + (os.pathsep + env["PYTHONPATH"] if env.get("PYTHONPATH") else "")
    cmd = [sys.executable, "-c", code, "infer", "--model", str(model), "--in", str(src), "--out", str(out)]
    return subprocess.run(cmd, capture_output=True, text=True, env=env)


def pipeline_demo(workdir: str | os.PathLike, seed: int = 0, n: int = 200, size: int = 64, epochs: int = 20,
                  force: bool = False, cfg: TrainConfig | None = None) -> DemoResult:
    workdir = Path(workdir)
    if workdir.exists() and any(workdir.iterdir()):
        if not force:
            raise FileExistsError(f"{workdir} is not empty (use force)")
        shutil.rmtree(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    cfg = cfg or desk_preset(seed=seed, epochs_stage1=epochs, epochs_stage2=epochs)
    timings: dict[str, float] = {}

    def timed(label, fn, *a, **kw):
        t0 = time.perf_counter()
        out = fn(*a, **kw)
        timings[label] = time.perf_counter() - t0
        return out

    data = workdir / "data"
    manifest = timed("data", write_dataset, data, n, size, seed)
    samples, mask_paths = load_pairs(manifest)
    train, val, test = split_dataset(samples, SplitSpec(seed=seed))
    provider = MaskProvider("file", 7, paths=mask_paths)
    (workdir / "config.txt").write_text(cfg.to_text(), encoding="utf-8")

    teacher_dir, students = workdir / "teacher", workdir / "students"
    teacher_dir.mkdir()
    teacher, stage1 = timed("stage1", pretrain_teacher, train, provider, cfg, val)
    teacher.freeze()
    save_checkpoint(teacher, teacher_dir / "teacher.spdc")
    stage1.write_csv(teacher_dir / "stage1_report.csv", timing=False)
    input_val_psnr, _ = validate(identity_restorer, val)

    phi = FeatureExtractor()
    before = {**teacher.snapshot(), **phi.snapshot()}
    runs = {}
    for label, t in (("distilled_student", teacher), ("baseline_student", None)):
        student, report = timed(label, train_student, train, provider, t, cfg, val, phi)
        d = students / label
        d.mkdir(parents=True)
        save_checkpoint(student, d / "student.spdc")
        report.write_csv(d / "stage2_report.csv", timing=False)
        runs[label] = report
    frozen_ok = _snapshot_equal(before, {**teacher.snapshot(), **phi.snapshot()})

    # Held-out test images: references, inputs and the teacher's restorations.
    test_dir = workdir / "test"
    for sub in ("ref", "input", "teacher"):
        (test_dir / sub).mkdir(parents=True)
    restore_teacher = teacher_restorer(teacher, provider)
    with no_grad():
        for s in test:
            name = f"{s.image_id}.pgm"
            write_pgm(test_dir / "ref" / name, s.reference)
            write_pgm(test_dir / "input" / name, s.degraded)
            out = restore_teacher(s.degraded[None, None].astype(np.float32), [s])[0, 0]
            write_pgm(test_dir / "teacher" / name, np.clip(out, 0.0, 1.0))

    # Students restore the test inputs with masks and teacher out of reach.
    stash = workdir / ".stash"
    stash.mkdir()
    moved = [(data / "masks", stash / "masks"), (teacher_dir, stash / "teacher")]
    purity_ok = True
    t0 = time.perf_counter()
    try:
        for src, dst in moved:
            src.rename(dst)
        for label in ("baseline_student", "distilled_student"):
            proc = _infer_subprocess(students / label / "student.spdc", test_dir / "input", test_dir / label)
            if proc.returncode != 0:
                log.error("infer for %s failed: %s", label, proc.stderr.strip())
                purity_ok = False
    finally:
        for src, dst in moved:
            if dst.exists():
                dst.rename(src)
        stash.rmdir()
    timings["inference"] = time.perf_counter() - t0

    comparison = []
    for label in COMPARISON_ROWS:
        pred = test_dir / label
        if not pred.is_dir():
            comparison.append((label, float("nan"), float("nan")))
            continue
        report = evaluate_dirs(pred, test_dir / "ref")
        report.write_csv(test_dir / f"eval_{label}.csv")
        comparison.append((label, report.mean_psnr, report.mean_ssim))
    with open(workdir / "comparison.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["method", "psnr_db", "ssim"])
        for label, p, s in comparison:
            w.writerow([label, f"{p:.6f}", f"{s:.8f}"])
    with open(workdir / "purity.txt", "w") as f:
        f.write(f"inference_without_teacher_or_masks={'ok' if purity_ok else 'failed'}\n")
        f.write(f"teacher_unchanged_by_distillation={'ok' if frozen_ok else 'failed'}\n")
    with open(workdir / "timings.log", "w") as f:
        for label, secs in timings.items():
            f.write(f"{label} {secs:.2f}\n")

    return DemoResult(workdir, comparison, input_val_psnr, stage1, runs["distilled_student"],
                      runs["baseline_student"], purity_ok, frozen_ok, timings)
