"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numerical_grad(f: Callable[[], float], arr: np.ndarray, eps: float = 1e-4,
                   indices: Sequence[tuple[int, ...]] | None = None) -> np.ndarray:
    """d f / d arr by central differences, perturbing ``arr`` in place.

    Only ``indices`` are evaluated when given; other entries stay NaN.
    """
    grad = np.full(arr.shape, np.nan) if indices is not None else np.zeros(arr.shape)
    it = indices if indices is not None else list(np.ndindex(arr.shape))
    for idx in it:
        orig = arr[idx]
        arr[idx] = orig + eps
        fp = f()
        arr[idx] = orig - eps
        fm = f()
        arr[idx] = orig
        grad[idx] = (fp - fm) / (2 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest absolute deviation, relative to the larger gradient magnitude.

    Entries that were not evaluated (NaN in ``numeric``) are ignored.  Two
    all-zero gradients compare as error 0.
    """
    mask = ~np.isnan(numeric)
    a = np.asarray(analytic, dtype=np.float64)[mask]
    n = numeric[mask]
    if a.size == 0:
        return 0.0
    scale = max(np.abs(a).max(), np.abs(n).max())
    if scale == 0.0:
        return 0.0
    return float(np.abs(a - n).max() / scale)


def check_tensor_grads(loss_fn: Callable[[], Tensor], tensors: Sequence[Tensor], eps: float = 1e-4,
                       max_entries: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Max relative error between backprop and finite differences.

    ``tensors`` must be float64 leaves with ``requires_grad`` set; the loss
    is rebuilt by ``loss_fn`` on every evaluation.  With ``max_entries`` a
    random subset of entries per tensor is checked.
    """
    for t in tensors:
        if t.dtype != np.float64:
            raise TypeError("gradient checks run in 64-bit mode; convert inputs to float64")
        t.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]

    def value() -> float:
        return float(loss_fn().data)

    worst = 0.0
    for t, a in zip(tensors, analytic):
        indices = None
        if max_entries is not None and t.data.size > max_entries:
            rng = rng or np.random.default_rng(0)
            flat = rng.choice(t.data.size, size=max_entries, replace=False)
            indices = [np.unravel_index(i, t.shape) for i in sorted(flat)]
        num = numerical_grad(value, t.data, eps, indices)
        worst = max(worst, relative_error(a, num))
    return worst
