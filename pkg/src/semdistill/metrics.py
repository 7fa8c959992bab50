"""Full-reference image quality: PSNR and SSIM, per image and per directory."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .images import as_gray

PSNR_CAP_DB = 80.0
MSE_FLOOR = 1e-8


@dataclass(frozen=True)
class SSIMConfig:
    win_size: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = 1.0


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR in dB for peak 1; exact matches report the 80 dB cap."""
    a, b = as_gray(a), as_gray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    return 10.0 * math.log10(1.0 / max(mse, MSE_FLOOR))


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def ssim_map(a: np.ndarray, b: np.ndarray, cfg: SSIMConfig = SSIMConfig()) -> np.ndarray:
    """Local SSIM on every full window position (no padding)."""
    a = as_gray(a).astype(np.float64)
    b = as_gray(b).astype(np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape) < cfg.win_size:
        raise ValueError(f"image {a.shape} is smaller than the {cfg.win_size}x{cfg.win_size} window")
    g = gaussian_window(cfg.win_size, cfg.sigma)
    r = cfg.win_size // 2

    def filt(x):
        y = ndimage.correlate1d(x, g, axis=0, mode="constant")
        y = ndimage.correlate1d(y, g, axis=1, mode="constant")
        return y[r:-r or None, r:-r or None]

    c1 = (cfg.k1 * cfg.data_range) ** 2
    c2 = (cfg.k2 * cfg.data_range) ** 2
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a * mu_a
    var_b = filt(b * b) - mu_b * mu_b
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a: np.ndarray, b: np.ndarray, cfg: SSIMConfig = SSIMConfig()) -> float:
    return float(ssim_map(a, b, cfg).mean())


@dataclass
class MetricReport:
    rows: list[tuple[str, float, float]] = field(default_factory=list)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([r[1] for r in self.rows]))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([r[2] for r in self.rows]))

    def write_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["filename", "psnr_db", "ssim"])
            for name, p, s in self.rows:
                w.writerow([name, f"{p:.6f}", f"{s:.8f}"])
            w.writerow(["MEAN", f"{self.mean_psnr:.6f}", f"{self.mean_ssim:.8f}"])


def evaluate_dirs(pred_dir: str | os.PathLike, ref_dir: str | os.PathLike,
                  cfg: SSIMConfig = SSIMConfig()) -> MetricReport:
    """Compare same-named ``.pgm`` files; rows are sorted by filename."""
    from .data.pgm import read_pgm

    pred_dir, ref_dir = Path(pred_dir), Path(ref_dir)
    preds = {p.name for p in pred_dir.glob("*.pgm")}
    refs = {p.name for p in ref_dir.glob("*.pgm")}
    if not preds:
        raise FileNotFoundError(f"no .pgm files in {pred_dir}")
    for name in sorted(preds ^ refs):
        side = ref_dir if name in preds else pred_dir
        raise FileNotFoundError(f"{name}: no counterpart in {side}")
    report = MetricReport()
    for name in sorted(preds):
        a = read_pgm(pred_dir / name)
        b = read_pgm(ref_dir / name)
        report.rows.append((name, psnr(a, b), ssim(a, b, cfg)))
    return report
