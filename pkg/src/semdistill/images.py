"""Value types shared across the pipeline.

Gray images are plain 2-D float32 arrays with intensities in [0, 1].  Label
maps carry their own invariants and get a small wrapper.
"""

from __future__ import annotations

import numpy as np


def as_gray(img) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float32)
    if arr.ndim != 2:
        raise ValueError(f"gray image must be 2-D, got shape {arr.shape}")
    return arr


class SegmentationMap:
    """Hard partition of an image into regions labelled ``0..k-1``.

    Every region is non-empty.  Use :meth:`from_labels` to build one from an
    arbitrary integer array; it renumbers labels compactly, keeping their
    relative order.
    """

    __slots__ = ("labels", "k")

    def __init__(self, labels: np.ndarray, k: int | None = None):
        labels = np.asarray(labels)
        if labels.ndim != 2:
            raise ValueError(f"label map must be 2-D, got shape {labels.shape}")
        if not np.issubdtype(labels.dtype, np.integer):
            raise ValueError(f"labels must be integers, got {labels.dtype}")
        if labels.size == 0:
            raise ValueError("label map is empty")
        lo, hi = int(labels.min()), int(labels.max())
        if k is None:
            k = hi + 1
        if lo < 0 or hi >= k:
            raise ValueError(f"labels must lie in 0..{k - 1}, found range {lo}..{hi}")
        counts = np.bincount(labels.ravel(), minlength=k)
        if (counts == 0).any():
            missing = np.flatnonzero(counts == 0).tolist()
            raise ValueError(f"regions {missing} are empty")
        self.labels = labels.astype(np.int32, copy=True)
        self.labels.setflags(write=False)
        self.k = int(k)

    @classmethod
    def from_labels(cls, labels) -> "SegmentationMap":
        labels = np.asarray(labels)
        if labels.ndim == 2 and labels.size and labels.min() < 0:
            raise ValueError("labels must be non-negative")
        uniq, inverse = np.unique(labels, return_inverse=True)
        return cls(inverse.reshape(labels.shape), len(uniq))

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    def counts(self) -> np.ndarray:
        return np.bincount(self.labels.ravel(), minlength=self.k)

    def masks(self) -> np.ndarray:
        """(k, H, W) boolean stack, one mask per region."""
        return self.labels[None] == np.arange(self.k)[:, None, None]

    def relabel(self, perm) -> "SegmentationMap":
        """Map region ``i`` to ``perm[i]``."""
        perm = np.asarray(perm)
        return SegmentationMap(perm[self.labels], self.k)

    def __eq__(self, other) -> bool:
        if not isinstance(other, SegmentationMap):
            return NotImplemented
        return self.k == other.k and np.array_equal(self.labels, other.labels)

    def __repr__(self) -> str:
        return f"SegmentationMap(shape={self.shape}, k={self.k})"
