from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, TypeVar

import numpy as np

T = TypeVar("T")


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.70
    val: float = 0.15
    test: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if min(self.train, self.val, self.test) < 0 or not math.isclose(self.train + self.val + self.test, 1.0):
            raise ValueError("split fractions must be non-negative and sum to 1")


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5 + 1e-9))


def split_dataset(items: Sequence[T], spec: SplitSpec = SplitSpec()) -> tuple[list[T], list[T], list[T]]:
    """Seeded shuffle, then train/val/test of sizes round(0.7 N), round(0.15 N), rest."""
    n = len(items)
    if n < 3:
        raise ValueError("need at least 3 items to split")
    order = np.random.default_rng(spec.seed).permutation(n)
    n_train = _round_half_up(spec.train * n)
    n_val = min(_round_half_up(spec.val * n), n - n_train)
    shuffled = [items[i] for i in order]
    return shuffled[:n_train], shuffled[n_train:n_train + n_val], shuffled[n_train + n_val:]
