"""Procedural stand-in scans: bright elongated structures on a dark field."""

from __future__ import annotations

import numpy as np

from ..images import SegmentationMap

BACKGROUND_LEVEL = 0.06


def _capsule(h: int, w: int, rng: np.random.Generator):
    """Mask of a random rotated capsule and each pixel's coordinate along its axis in [-1, 1]."""
    cy, cx = rng.uniform(0.15, 0.85) * h, rng.uniform(0.15, 0.85) * w
    theta = rng.uniform(0, np.pi)
    half_len = rng.uniform(0.18, 0.38) * min(h, w)
    radius = rng.uniform(0.05, 0.09) * min(h, w)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    along = dx * np.cos(theta) - dy * np.sin(theta)
    across = dx * np.sin(theta) + dy * np.cos(theta)
    t = np.clip(along, -half_len, half_len)
    inside = (along - t) ** 2 + across ** 2 <= radius ** 2
    return inside, along / (half_len + radius)


def synth_scene(seed: int, height: int = 64, width: int = 64, k: int = 7) -> tuple[np.ndarray, SegmentationMap]:
    """Clean image plus the exact label map used to draw it.

    Label 0 is the background at a constant low level; labels ``1..k-1`` are
    capsules, each with its own uptake level and a linear intensity ramp
    along its long axis.  Later capsules paint over earlier ones.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = np.random.default_rng(seed)
    for _ in range(100):
        labels = np.zeros((height, width), dtype=np.int32)
        img = np.full((height, width), BACKGROUND_LEVEL)
        levels = rng.permutation(np.linspace(0.35, 0.9, max(k - 1, 1)))
        for lab in range(1, k):
            inside, along = _capsule(height, width, rng)
            ramp = rng.uniform(-0.08, 0.08)
            labels[inside] = lab
            img[inside] = levels[lab - 1] + ramp * along[inside]
        if len(np.unique(labels)) == k:
            return np.clip(img, 0.0, 1.0).astype(np.float32), SegmentationMap(labels, k)
    raise RuntimeError(f"could not place {k} visible regions in a {height}x{width} scene")
