"""Training objectives: negative PSNR, SKD, SCM and their weighted total."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .images import SegmentationMap
from .numerics import (Parameter, ShapeError, Tensor, add, conv2d, detach, make_result, no_grad, relu,
                       scale)

MSE_FLOOR = 1e-8
COSINE_EPS = 1e-12
PHI_SEED = 8_2024

Maps = Union[SegmentationMap, Sequence[SegmentationMap]]


@dataclass(frozen=True)
class LossWeights:
    skd: float = 0.01
    scm: float = 100.0

    def __post_init__(self):
        if self.skd < 0 or self.scm < 0:
            raise ValueError("loss weights must be non-negative")


def _ref_array(ref, like: Tensor) -> np.ndarray:
    arr = ref.data if isinstance(ref, Tensor) else np.asarray(ref)
    if arr.shape != like.shape:
        raise ShapeError(f"shape mismatch {like.shape} vs {arr.shape}")
    return arr.astype(like.dtype, copy=False)


def psnr_loss(pred: Tensor, ref) -> Tensor:
    """``10 * log10(max(MSE, 1e-8))``, i.e. negative PSNR at peak 1."""
    r = _ref_array(ref, pred)
    diff = pred.data - r
    n = diff.size
    mse = float(np.mean(np.square(diff, dtype=np.float64)))
    floored = max(mse, MSE_FLOOR)
    value = np.asarray(10.0 * math.log10(floored), dtype=pred.dtype)

    def back(g):
        if mse <= MSE_FLOOR:
            return (np.zeros_like(pred.data),)
        coef = pred.dtype.type(float(g) * 10.0 / (math.log(10.0) * mse) * 2.0 / n)
        return (diff * coef,)

    return make_result(value, (pred,), back)


def skd_loss(student_out: Tensor, teacher_out, detach_teacher: bool = True) -> Tensor:
    """Mean piecewise distillation penalty: quadratic for |d| <= 1, linear beyond.

    The teacher side is a constant target unless ``detach_teacher`` is off
    and ``teacher_out`` is a tensor in the graph.
    """
    t = _ref_array(teacher_out, student_out)
    d = student_out.data - t
    ad = np.abs(d)
    small = ad <= 1.0
    per = np.where(small, 0.5 * d * d, ad - 0.5)
    n = d.size
    value = np.asarray(per.sum(dtype=np.float64) / n, dtype=student_out.dtype)

    def back(g):
        gs = np.where(small, d, np.sign(d)) * student_out.dtype.type(float(g) / n)
        return gs, -gs

    parents = (student_out,)
    if not detach_teacher and isinstance(teacher_out, Tensor):
        parents = (student_out, teacher_out)
    return make_result(value, parents, back)


# --- semantic consistency ---------------------------------------------------

class FeatureExtractor:
    """Frozen two-block conv stack (1 -> 16 -> 16 channels, 3x3, ReLU).

    Weights are He-initialized from ``seed``; the same seed always yields the
    same extractor.
    """

    def __init__(self, seed: int = PHI_SEED, channels: int = 16, kernel_size: int = 3, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.params: dict[str, Parameter] = {}
        in_ch = 1
        for i in range(2):
            std = math.sqrt(2.0 / (in_ch * kernel_size ** 2))
            w = rng.standard_normal((channels, in_ch, kernel_size, kernel_size)) * std
            self.params[f"conv{i}.weight"] = Parameter(w.astype(dtype), f"phi.conv{i}.weight", frozen=True)
            self.params[f"conv{i}.bias"] = Parameter(np.zeros(channels, dtype), f"phi.conv{i}.bias", frozen=True)
            in_ch = channels

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params.items()}

    def astype(self, dtype) -> "FeatureExtractor":
        clone = FeatureExtractor.__new__(FeatureExtractor)
        clone.params = {n: Parameter(p.data.astype(dtype), p.name, frozen=True) for n, p in self.params.items()}
        return clone

    def __call__(self, x: Tensor) -> Tensor:
        return extract_features(self, x)


def extract_features(phi: FeatureExtractor, x: Tensor) -> Tensor:
    if x.ndim != 4 or x.shape[1] != 1:
        raise ShapeError(f"feature extractor expects (N, 1, H, W) input, got {x.shape}")
    h = x
    for i in range(2):
        h = relu(conv2d(h, phi.params[f"conv{i}.weight"], phi.params[f"conv{i}.bias"]))
    return h


def region_vectors(H: np.ndarray, S: SegmentationMap, pooled: bool = False) -> np.ndarray:
    """One row per region for a single (C, H, W) feature map.

    ``pooled=False`` gives ``vec(H * mask_k)`` (length C*H*W, zeros outside
    the region).  Rows of a hard partition are then mutually orthogonal.
    ``pooled=True`` sums each region's pixels per channel (length C).
    """
    H = np.asarray(H)
    if H.ndim != 3 or H.shape[1:] != S.shape:
        raise ShapeError(f"features {H.shape} do not match mask {S.shape}")
    c = H.shape[0]
    if pooled:
        lab = S.labels.ravel()
        idx = (lab[None, :] * c + np.arange(c)[:, None]).ravel()
        sums = np.bincount(idx, weights=H.reshape(c, -1).astype(np.float64).ravel(), minlength=S.k * c)
        return sums.reshape(S.k, c)
    return (H[None] * S.masks()[:, None]).reshape(S.k, -1)


def cosine_matrix(vectors) -> np.ndarray:
    """``c_ij = <v_i, v_j> / (|v_i| |v_j| + 1e-12)`` for rows of ``vectors``."""
    V = np.asarray(vectors, dtype=np.float64)
    if V.ndim != 2 or V.shape[0] < 2:
        raise ValueError("need at least two vectors")
    norms = np.sqrt(np.einsum("ij,ij->i", V, V))
    return (V @ V.T) / (np.outer(norms, norms) + COSINE_EPS)


def _scm_item(HA: np.ndarray, HB: np.ndarray, S: SegmentationMap, pooled: bool):
    """Per-item loss and its gradients w.r.t. both feature maps."""
    k = S.k
    lab = S.labels.ravel()
    off = ~np.eye(k, dtype=bool)
    norm = 1.0 / (k * (k - 1))

    if pooled:
        VA, VB = region_vectors(HA, S, True), region_vectors(HB, S, True)
        GA, GB = VA @ VA.T, VB @ VB.T
    else:
        # Masked vectors of a partition never overlap, so the Gram matrix is
        # diagonal with each region's feature energy on it.
        def gram(H):
            e = np.square(H.reshape(H.shape[0], -1), dtype=np.float64).sum(axis=0)
            return np.diag(np.bincount(lab, weights=e, minlength=k))
        GA, GB = gram(HA), gram(HB)

    def cos(G):
        n = np.sqrt(np.diag(G))
        D = np.outer(n, n) + COSINE_EPS
        return G / D, n, D

    CA, nA, DA = cos(GA)
    CB, nB, DB = cos(GB)
    diff = CA - CB
    loss = float(np.abs(diff[off]).sum() * norm)
    sgn = np.where(off, np.sign(diff), 0.0) * norm

    def grad(H, C, n, D, s):
        A = s / D
        B = s * C / D  # == s * G / D**2
        inv_n = np.divide(1.0, n, out=np.zeros_like(n), where=n > 0)
        radial = (B @ n) * inv_n
        Hf = H.reshape(H.shape[0], -1).astype(np.float64)
        if pooled:
            V = region_vectors(H, S, True)
            gV = 2.0 * (A @ V) - 2.0 * radial[:, None] * V
            return gV[lab].T.reshape(H.shape)
        # Row k of A @ V restricted to region k only sees A[k, k] == 0.
        return (-2.0 * radial[lab] * Hf).reshape(H.shape)

    gA = grad(HA, CA, nA, DA, sgn)
    gB = grad(HB, CB, nB, DB, -sgn)
    return loss, gA, gB


def scm_from_features(HA: Tensor, HB: Tensor, S: Maps, pooled: bool = False) -> Tensor:
    """Batch mean of the region-pair cosine discrepancy between two feature maps."""
    if HA.shape != HB.shape:
        raise ShapeError(f"feature shapes differ: {HA.shape} vs {HB.shape}")
    n = HA.shape[0]
    maps = [S] * n if isinstance(S, SegmentationMap) else list(S)
    if len(maps) != n:
        raise ShapeError(f"got {len(maps)} label maps for a batch of {n}")
    total = 0.0
    gA = np.zeros(HA.shape)
    gB = np.zeros(HB.shape)
    for i, s in enumerate(maps):
        if s.k < 2:
            warnings.warn("semantic consistency needs >= 2 regions; item contributes 0", RuntimeWarning,
                          stacklevel=3)
            continue
        loss, ga, gb = _scm_item(HA.data[i], HB.data[i], s, pooled)
        total += loss
        gA[i], gB[i] = ga, gb
    value = np.asarray(total / n, dtype=HA.dtype)

    def back(g):
        f = float(g) / n
        return (gA * f).astype(HA.dtype), (gB * f).astype(HB.dtype)

    return make_result(value, (HA, HB), back)


def scm_loss(X_A: Tensor, X_B, S: Maps, phi: FeatureExtractor, pooled: bool = False,
             detach_b: bool = True) -> Tensor:
    """Semantic consistency between two restored images.

    Features come from the frozen extractor ``phi``.  By default ``X_B`` is a
    fixed target (no gradient).  Region vectors are the masked feature maps;
    for a hard partition they are mutually orthogonal, so every off-diagonal
    cosine is 0 on both branches and the loss vanishes.  ``pooled=True``
    compares per-region channel sums instead, which is not degenerate.
    """
    if not isinstance(X_B, Tensor):
        X_B = Tensor(np.asarray(X_B, dtype=X_A.dtype))
    if X_A.shape != X_B.shape:
        raise ShapeError(f"scm_loss: shape mismatch {X_A.shape} vs {X_B.shape}")
    HA = extract_features(phi, X_A)
    if detach_b:
        with no_grad():
            HB = extract_features(phi, detach(X_B))
    else:
        HB = extract_features(phi, X_B)
    return scm_from_features(HA, HB, S, pooled)


def total_loss(recon: Tensor, skd: Tensor, scm: Tensor, w: LossWeights = LossWeights()) -> Tensor:
    """``recon + w.skd * skd + w.scm * scm``."""
    return add(add(recon, scale(skd, w.skd)), scale(scm, w.scm))
