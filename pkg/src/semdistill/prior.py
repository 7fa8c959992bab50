"""Segmentation priors and their injection into the teacher's input.

Mask average pooling replaces every feature value with the mean of that
feature over the pixel's region.  Masks come from a :class:`MaskProvider`:
either quantile bands of the reference image or label maps on disk.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np
from scipy import ndimage

from .data.pgm import read_label_pgm
from .images import SegmentationMap, as_gray
from .numerics import ShapeError, Tensor, concat_channels, make_result

Maps = Union[SegmentationMap, Sequence[SegmentationMap]]


class MaskError(ValueError):
    """A mask could not be provided or failed validation."""


def _per_item(S: Maps, n: int) -> list[SegmentationMap]:
    if isinstance(S, SegmentationMap):
        return [S] * n
    maps = list(S)
    if len(maps) != n:
        raise ShapeError(f"got {len(maps)} label maps for a batch of {n}")
    return maps


def _region_means(x: np.ndarray, labels: np.ndarray, k: int, counts: np.ndarray) -> np.ndarray:
    """(C, HW) values -> (C, k) region means.

    Sums accumulate in float64 in raster order, so the result does not depend
    on which id a region carries and constant regions come back unchanged.
    """
    c = x.shape[0]
    idx = (labels[None, :] + k * np.arange(c)[:, None]).ravel()
    sums = np.bincount(idx, weights=x.ravel().astype(np.float64), minlength=c * k).reshape(c, k)
    return sums / counts


def map_pool(F: Tensor, S: Maps) -> Tensor:
    """Mask average pooling of a (N, C, H, W) feature map.

    ``S`` is one map shared by the batch or one map per batch item.
    """
    if F.ndim != 4:
        raise ShapeError(f"map_pool: features must be rank 4, got {F.shape}")
    n, c, h, w = F.shape
    maps = _per_item(S, n)
    for s in maps:
        if s.shape != (h, w):
            raise ShapeError(f"map_pool: mask is {s.shape[0]}x{s.shape[1]}, features are {h}x{w}")
    flat = [(s.labels.ravel(), s.k, s.counts().astype(np.float64)) for s in maps]
    out = np.empty_like(F.data)
    for i, (lab, k, cnt) in enumerate(flat):
        means = _region_means(F.data[i].reshape(c, h * w), lab, k, cnt)
        out[i] = means[:, lab].reshape(c, h, w)

    def back(g):
        gx = np.empty_like(g)
        for i, (lab, k, cnt) in enumerate(flat):
            gm = _region_means(g[i].reshape(c, h * w), lab, k, cnt)
            gx[i] = gm[:, lab].reshape(c, h, w)
        return (gx,)

    return make_result(out, (F,), back)


def region_dropout(S: SegmentationMap, p: float, seed, return_dropped: bool = False):
    """Drop each region with probability ``p``, merging dropped ones into one.

    Survivors keep their relative order and the catch-all region takes the
    last label.  At least one region always survives.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    dropped = rng.random(S.k) < p
    if dropped.all():
        dropped[rng.integers(S.k)] = False
    if not dropped.any():
        out = S
    else:
        survivors = int((~dropped).sum())
        new_id = np.full(S.k, survivors, dtype=np.int32)
        new_id[~dropped] = np.arange(survivors)
        out = SegmentationMap(new_id[S.labels], survivors + 1)
    return (out, dropped) if return_dropped else out


def spi_fuse(F_map: Tensor, image: Tensor) -> Tensor:
    """Teacher input: pooled features first, then the image channel."""
    return concat_channels(F_map, image)


def one_hot(S: Maps, n: int, k: int | None = None, dtype=np.float32) -> np.ndarray:
    maps = _per_item(S, n)
    k = max(s.k for s in maps) if k is None else k
    h, w = maps[0].shape
    out = np.zeros((n, k, h, w), dtype=dtype)
    for i, s in enumerate(maps):
        if s.k > k:
            raise ShapeError(f"label map has {s.k} regions, one-hot width is {k}")
        out[i] = s.masks()[:k] if s.k == k else np.concatenate(
            [s.masks(), np.zeros((k - s.k, h, w), dtype=bool)])
    return out


def cat_fuse(S: Maps, image: Tensor, k: int | None = None) -> Tensor:
    """Ablation baseline: one-hot label channels concatenated with the image."""
    n, _, h, w = image.shape
    for s in _per_item(S, n):
        if s.shape != (h, w):
            raise ShapeError(f"cat_fuse: mask is {s.shape[0]}x{s.shape[1]}, image is {h}x{w}")
    return concat_channels(Tensor(one_hot(S, n, k, image.dtype)), image)


# --- mask providers ---------------------------------------------------------

def quantile_regions(reference: np.ndarray, k: int = 7) -> SegmentationMap:
    """Intensity-quantile bands split into 4-connected components.

    When there are more than ``k`` components the ``k`` largest are kept
    and every other pixel joins its nearest kept component.
    """
    ref = as_gray(reference).astype(np.float64)
    qs = np.quantile(ref, np.arange(1, k) / k) if k > 1 else np.array([])
    bands = np.digitize(ref, np.unique(qs), right=True)

    comp = np.zeros(ref.shape, dtype=np.int64)
    n_comp = 0
    for b in np.unique(bands):
        lab, nb = ndimage.label(bands == b)
        comp[lab > 0] = lab[lab > 0] + n_comp
        n_comp += nb
    comp -= 1

    if n_comp > k:
        sizes = np.bincount(comp.ravel(), minlength=n_comp)
        first = np.full(n_comp, comp.size)
        np.minimum.at(first, comp.ravel(), np.arange(comp.size))
        rank = np.lexsort((first, -sizes))
        keep = np.zeros(n_comp, dtype=bool)
        keep[rank[:k]] = True
        kept_px = keep[comp]
        _, (ri, ci) = ndimage.distance_transform_edt(~kept_px, return_indices=True)
        comp = comp[ri, ci]
    # Number regions by first appearance in raster order.
    _, first_idx, inverse = np.unique(comp.ravel(), return_index=True, return_inverse=True)
    order = np.argsort(np.argsort(first_idx))
    return SegmentationMap(order[inverse].reshape(ref.shape).astype(np.int32), len(first_idx))


@dataclass
class MaskProvider:
    """Source of label maps, keyed by image identity.

    ``kind="synthetic"`` derives regions from the reference image;
    ``kind="file"`` reads ``<directory>/<image_id>.pgm`` or an explicit path
    from ``paths``.
    """

    kind: str = "synthetic"
    k: int = 7
    directory: Path | None = None
    paths: dict[str, Path] = field(default_factory=dict)
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.kind not in ("synthetic", "file"):
            raise ValueError(f"unknown mask provider kind {self.kind!r}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.directory is not None:
            self.directory = Path(self.directory)

    @classmethod
    def from_spec(cls, spec: str, k: int = 7) -> "MaskProvider":
        """Parse ``synthetic`` or ``dir:<path>``."""
        if spec == "synthetic":
            return cls("synthetic", k)
        if spec.startswith("dir:"):
            return cls("file", k, directory=Path(spec[4:]))
        raise ValueError(f"mask source must be 'synthetic' or 'dir:<path>', got {spec!r}")

    def path_for(self, image_id: str) -> Path:
        if image_id in self.paths:
            return Path(self.paths[image_id])
        if self.directory is None:
            raise MaskError(f"no mask path known for image {image_id!r}")
        return self.directory / f"{image_id}.pgm"


def provide_masks(provider: MaskProvider, image_id: str, reference: np.ndarray | None = None) -> SegmentationMap:
    if image_id in provider._cache:
        return provider._cache[image_id]
    if provider.kind == "synthetic":
        if reference is None:
            raise MaskError("synthetic masks need the reference image")
        seg = quantile_regions(reference, provider.k)
    else:
        path = provider.path_for(image_id)
        if not os.path.isfile(path):
            raise MaskError(f"missing mask file for image {image_id!r}: {path}")
        try:
            seg = read_label_pgm(path, provider.k)
        except ValueError as exc:
            raise MaskError(str(exc)) from exc
        if reference is not None and seg.shape != np.shape(reference):
            raise MaskError(f"mask {path} is {seg.shape}, image is {np.shape(reference)}")
    provider._cache[image_id] = seg
    return seg
