"""Integer-shift patch registration by zero-normalized cross-correlation."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from ..images import as_gray


class Registration(NamedTuple):
    u: int
    v: int
    aligned: np.ndarray
    score: float


def translate(img: np.ndarray, u: int, v: int) -> np.ndarray:
    """``out[y, x] = img[y - u, x - v]`` with edge replication."""
    h, w = img.shape
    rows = np.clip(np.arange(h) - u, 0, h - 1)
    cols = np.clip(np.arange(w) - v, 0, w - 1)
    return img[np.ix_(rows, cols)]


def zncc(a: np.ndarray, b: np.ndarray) -> float:
    """Zero-normalized cross-correlation; 0 when either side is constant."""
    a = a - a.mean()
    b = b - b.mean()
    den = np.sqrt((a * a).sum() * (b * b).sum())
    if den == 0.0:
        return 0.0
    return float((a * b).sum() / den)


def _overlap(n: int, s: int) -> tuple[slice, slice]:
    """Output rows valid after shifting by s, and the source rows they read."""
    if s >= 0:
        return slice(s, n), slice(0, n - s)
    return slice(0, n + s), slice(-s, n)


def shift_order(radius: int) -> list[tuple[int, int]]:
    """Search order that realizes the tie-break: |u|+|v|, then u, then v."""
    shifts = [(u, v) for u in range(-radius, radius + 1) for v in range(-radius, radius + 1)]
    return sorted(shifts, key=lambda s: (abs(s[0]) + abs(s[1]), s[0], s[1]))


def register_patch(moving: np.ndarray, fixed: np.ndarray, radius: int) -> Registration:
    """Find the integer shift of ``moving`` that best matches ``fixed``.

    Every shift in ``[-radius, radius]^2`` is scored by ZNCC over the region
    where the shifted ``moving`` and ``fixed`` overlap.  ``aligned`` is
    ``moving`` shifted by the winning (u, v) with edge replication.
    """
    moving = as_gray(moving).astype(np.float64)
    fixed = as_gray(fixed).astype(np.float64)
    if moving.shape != fixed.shape:
        raise ValueError(f"patch shapes differ: {moving.shape} vs {fixed.shape}")
    if radius < 0:
        raise ValueError("radius must be non-negative")
    h, w = fixed.shape
    if (h - radius) * (w - radius) < 0.25 * h * w or radius >= min(h, w):
        raise ValueError(f"radius {radius} leaves less than 25% overlap on a {h}x{w} patch")

    best, best_score = (0, 0), -np.inf
    for u, v in shift_order(radius):
        out_r, src_r = _overlap(h, u)
        out_c, src_c = _overlap(w, v)
        score = zncc(moving[src_r, src_c], fixed[out_r, out_c])
        if score > best_score:
            best, best_score = (u, v), score
    u, v = best
    aligned = translate(moving, u, v).astype(np.float32)
    return Registration(u, v, aligned, float(best_score))
