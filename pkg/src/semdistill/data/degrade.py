"""Synthetic acquisition degradation: motion blur, speckle, Gaussian noise."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ..images import as_gray


@dataclass(frozen=True)
class DegradationConfig:
    """Noise variances are in intensity^2 units for images scaled to [0, 1]."""

    gaussian_var: float = 0.01
    speckle_var: float = 0.01
    blur_length: int = 10
    blur_angle: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.gaussian_var < 0 or self.speckle_var < 0:
            raise ValueError("noise variances must be non-negative")
        if self.blur_length < 1:
            raise ValueError("blur_length must be >= 1")


def motion_blur_kernel(length: int, angle: float) -> np.ndarray:
    """Normalized line kernel of odd size ``k >= length``.

    The line passes through the kernel centre at ``angle`` degrees
    (counter-clockwise from the +x axis, rows growing downward) and spans
    ``length - 1`` pixels between its end points before rasterization.
    """
    if length < 1:
        raise ValueError("length must be >= 1")
    k = int(length) | 1
    c = k // 2
    theta = np.deg2rad(angle)
    half = (length - 1) / 2.0
    t = np.linspace(-half, half, 8 * k + 1)
    cols = np.rint(c + t * np.cos(theta)).astype(int)
    rows = np.rint(c - t * np.sin(theta)).astype(int)
    keep = (rows >= 0) & (rows < k) & (cols >= 0) & (cols < k)
    kern = np.zeros((k, k))
    kern[rows[keep], cols[keep]] = 1.0
    return kern / kern.sum()


def blur(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Convolve with reflect padding; returns float64."""
    return ndimage.convolve(np.asarray(img, dtype=np.float64), kernel, mode="reflect")


def degrade(img: np.ndarray, cfg: DegradationConfig = DegradationConfig(), clip: bool = True) -> np.ndarray:
    """``clamp01(blur(img) * (1 + n_speckle) + n_gauss)``, seeded by ``cfg.seed``.

    With ``clip=False`` the unclamped result is returned (for noise
    statistics).
    """
    img = as_gray(img)
    rng = np.random.default_rng(cfg.seed)
    x = blur(img, motion_blur_kernel(cfg.blur_length, cfg.blur_angle)) if cfg.blur_length > 1 \
        else img.astype(np.float64)
    speckle = rng.normal(0.0, np.sqrt(cfg.speckle_var), size=x.shape)
    gauss = rng.normal(0.0, np.sqrt(cfg.gaussian_var), size=x.shape)
    out = x * (1.0 + speckle) + gauss
    if clip:
        out = np.clip(out, 0.0, 1.0)
    return out.astype(np.float32)
