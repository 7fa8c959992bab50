"""Regular patch grids."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..images import as_gray


@dataclass
class PatchGrid:
    patch_size: int = 192
    step: int = 192
    patches: list[tuple[int, int, np.ndarray]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.patches)

    def origins(self) -> list[tuple[int, int]]:
        return [(r, c) for r, c, _ in self.patches]


def crop_patches(img: np.ndarray, size: int = 192, step: int = 192) -> PatchGrid:
    """Row-major patches at multiples of ``step`` that lie fully inside ``img``.

    Partial patches along the right/bottom edges are discarded.
    """
    img = as_gray(img)
    if size < 1 or step < 1:
        raise ValueError("size and step must be positive")
    h, w = img.shape
    if size > min(h, w):
        raise ValueError(f"image {h}x{w} is smaller than one {size}x{size} patch")
    grid = PatchGrid(size, step)
    for r in range(0, h - size + 1, step):
        for c in range(0, w - size + 1, step):
            grid.patches.append((r, c, img[r:r + size, c:c + size].copy()))
    return grid


def reassemble(grid: PatchGrid, shape: tuple[int, int]) -> np.ndarray:
    """Paste patches back into a zero canvas of ``shape``."""
    out = np.zeros(shape, dtype=np.float32)
    s = grid.patch_size
    for r, c, p in grid.patches:
        out[r:r + s, c:c + s] = p
    return out
