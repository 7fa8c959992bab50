"""Finite-difference checks for every differentiable operation in the package.

Each check builds random float64 instances and compares backprop gradients
with central differences.  Inputs to piecewise ops are kept away from their
kinks so the reference derivative exists on the whole stencil.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .images import SegmentationMap
from .losses import FeatureExtractor, LossWeights, psnr_loss, scm_loss, skd_loss, total_loss
from .numerics import Tensor, check_tensor_grads, clamp01, concat_channels, conv2d, elementwise, mean, reduce, relu
from .prior import map_pool, spi_fuse
from .restorers import RestorerConfig, StudentModel, TeacherModel, student_forward, teacher_encode, teacher_forward

F64 = np.float64
DEFAULT_EPS = 1e-6


@dataclass
class GradResult:
    op: str
    max_rel_error: float
    instances: int
    seconds: float


def _t(rng, shape, low=-1.0, high=1.0):
    return Tensor(rng.uniform(low, high, size=shape).astype(F64), requires_grad=True)


def _away_from(rng, shape, kinks, margin, low, high):
    x = rng.uniform(low, high, size=shape)
    for k in kinks:
        near = np.abs(x - k) < margin
        x[near] = k + np.sign(x[near] - k + 1e-300) * margin * 2
    return Tensor(x.astype(F64), requires_grad=True)


def _weighted_sum(rng, y_fn):
    """Random linear functional of an op's output, so every entry matters."""
    w = {}

    def loss():
        y = y_fn()
        if "w" not in w:
            w["w"] = Tensor(rng.standard_normal(y.shape))
        return reduce("sum", elementwise("mul", y, w["w"]))
    return loss


def _labels(rng, h, w, k):
    lab = rng.integers(0, k, size=(h, w))
    lab.ravel()[:k] = np.arange(k)
    return SegmentationMap.from_labels(lab)


def _random_params(model, rng):
    for p in model.parameters():
        p.data[...] = rng.normal(0, 0.3, size=p.shape)
    return model


def _case_conv(rng, eps):
    x, w, b = _t(rng, (2, 2, 5, 5)), _t(rng, (3, 2, 3, 3)), _t(rng, (3,))
    return check_tensor_grads(_weighted_sum(rng, lambda: conv2d(x, w, b)), [x, w, b], eps)


def _binary(kind):
    def case(rng, eps):
        a, b = _t(rng, (2, 1, 4, 4)), _t(rng, (2, 1, 4, 4))
        return check_tensor_grads(_weighted_sum(rng, lambda: elementwise(kind, a, b)), [a, b], eps)
    return case


def _case_scale(rng, eps):
    a = _t(rng, (2, 1, 4, 4))
    s = rng.uniform(-2, 2)
    return check_tensor_grads(_weighted_sum(rng, lambda: elementwise("scale", a, s)), [a], eps)


def _case_relu(rng, eps):
    a = _away_from(rng, (2, 2, 4, 4), [0.0], 1e-3, -1, 1)
    return check_tensor_grads(_weighted_sum(rng, lambda: relu(a)), [a], eps)


def _case_clamp(rng, eps):
    a = _away_from(rng, (2, 2, 4, 4), [0.0, 1.0], 1e-3, -0.5, 1.5)
    return check_tensor_grads(_weighted_sum(rng, lambda: clamp01(a)), [a], eps)


def _case_concat(rng, eps):
    a, b = _t(rng, (2, 2, 3, 4)), _t(rng, (2, 1, 3, 4))
    return check_tensor_grads(_weighted_sum(rng, lambda: concat_channels(a, b)), [a, b], eps)


def _reduction(kind):
    def case(rng, eps):
        a = _t(rng, (2, 3, 4, 4))
        return check_tensor_grads(lambda: reduce(kind, a), [a], eps)
    return case


def _case_map_pool(rng, eps):
    F = _t(rng, (2, 3, 5, 6))
    maps = [_labels(rng, 5, 6, 3), _labels(rng, 5, 6, 4)]
    return check_tensor_grads(_weighted_sum(rng, lambda: map_pool(F, maps)), [F], eps)


def _case_psnr(rng, eps):
    pred = _t(rng, (2, 1, 6, 6), 0, 1)
    ref = rng.uniform(0, 1, size=(2, 1, 6, 6))
    return check_tensor_grads(lambda: psnr_loss(pred, ref), [pred], eps)


def _case_skd(rng, eps):
    target = rng.uniform(-1, 1, size=(2, 1, 6, 6))
    d = _away_from(rng, (2, 1, 6, 6), [-1.0, 0.0, 1.0], 1e-3, -2.5, 2.5)
    s = Tensor(d.data + target, requires_grad=True)
    return check_tensor_grads(lambda: skd_loss(s, target), [s], eps)


def _case_features(rng, eps):
    phi = FeatureExtractor().astype(F64)
    x = _t(rng, (2, 1, 6, 6), 0, 1)
    return check_tensor_grads(_weighted_sum(rng, lambda: phi(x)), [x], eps)


def _scm_case(pooled):
    def case(rng, eps):
        phi = FeatureExtractor().astype(F64)
        xa, xb = _t(rng, (2, 1, 8, 8), 0, 1), rng.uniform(0, 1, size=(2, 1, 8, 8))
        maps = [_labels(rng, 8, 8, 3), _labels(rng, 8, 8, 4)]
        return check_tensor_grads(lambda: scm_loss(xa, xb, maps, phi, pooled=pooled), [xa], eps)
    return case


_SMALL = RestorerConfig(base_channels=6, depth=2, kernel_size=3, teacher_encoder_channels=4)


def _case_student(rng, eps):
    m = _random_params(StudentModel(_SMALL).astype(F64), rng)
    x = _t(rng, (2, 1, 6, 6), 0, 1)
    return check_tensor_grads(_weighted_sum(rng, lambda: student_forward(m, x)), [x] + m.parameters(), eps,
                              max_entries=12, rng=rng)


def _case_teacher_encode(rng, eps):
    m = _random_params(TeacherModel(_SMALL).astype(F64), rng)
    x = _t(rng, (2, 1, 6, 6), 0, 1)
    return check_tensor_grads(_weighted_sum(rng, lambda: teacher_encode(m, x)), [x] + m.encoder_parameters(),
                              eps, max_entries=12, rng=rng)


def _case_teacher_pipeline(rng, eps):
    m = _random_params(TeacherModel(_SMALL).astype(F64), rng)
    x = _t(rng, (2, 1, 6, 6), 0, 1)
    maps = [_labels(rng, 6, 6, 3), _labels(rng, 6, 6, 2)]

    def out():
        return teacher_forward(m, spi_fuse(map_pool(teacher_encode(m, x), maps), x))
    return check_tensor_grads(_weighted_sum(rng, out), [x] + m.parameters(), eps, max_entries=12, rng=rng)


def _case_total(rng, eps):
    phi = FeatureExtractor().astype(F64)
    x = _t(rng, (1, 1, 8, 8), 0, 1)
    ref = rng.uniform(0, 1, size=(1, 1, 8, 8))
    teacher_out = rng.uniform(0, 1, size=(1, 1, 8, 8))
    seg = _labels(rng, 8, 8, 3)
    w = LossWeights(0.5, 2.0)
    return check_tensor_grads(
        lambda: total_loss(psnr_loss(x, ref), skd_loss(x, teacher_out), scm_loss(x, teacher_out, seg, phi, pooled=True), w),
        [x], eps)


CASES: dict[str, Callable] = {
    "conv2d": _case_conv,
    "add": _binary("add"),
    "sub": _binary("sub"),
    "mul": _binary("mul"),
    "scale": _case_scale,
    "relu": _case_relu,
    "clamp01": _case_clamp,
    "concat_channels": _case_concat,
    "reduce_mean": _reduction("mean"),
    "reduce_sum": _reduction("sum"),
    "map_pool": _case_map_pool,
    "psnr_loss": _case_psnr,
    "skd_loss": _case_skd,
    "extract_features": _case_features,
    "scm_loss": _scm_case(False),
    "scm_loss_pooled": _scm_case(True),
    "student_forward": _case_student,
    "teacher_encode": _case_teacher_encode,
    "teacher_pipeline": _case_teacher_pipeline,
    "total_loss": _case_total,
}


def run_gradient_suite(instances: int = 10, seed: int = 0, eps: float = DEFAULT_EPS,
                       ops: list[str] | None = None) -> list[GradResult]:
    results = []
    for name in ops or list(CASES):
        rng = np.random.default_rng([seed, len(name), sum(map(ord, name))])
        t0 = time.perf_counter()
        worst = max(CASES[name](rng, eps) for _ in range(instances))
        results.append(GradResult(name, worst, instances, time.perf_counter() - t0))
    return results
