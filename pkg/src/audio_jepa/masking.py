"""Random patch masking.

One mask ratio is drawn per batch; every example then gets its own uniformly
random set of ``round_half_up(ratio * num_patches)`` masked indices. All draws
come from a ``numpy.random.Generator`` (PCG64) in a fixed order: the ratio
first, then one partial Fisher-Yates shuffle per example.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class MaskSpec:
    masked: tuple[int, ...]
    visible: tuple[int, ...]
    num_patches: int
    ratio: float

    def __post_init__(self):
        if set(self.masked) & set(self.visible):
            raise ValueError("masked and visible indices overlap")
        if sorted(self.masked + self.visible) != list(range(self.num_patches)):
            raise ValueError("masked and visible indices do not cover every patch")
        if list(self.masked) != sorted(self.masked) or list(self.visible) != sorted(self.visible):
            raise ValueError("mask index lists must be sorted")

    @classmethod
    def from_masked(cls, masked, num_patches: int, ratio: float | None = None) -> MaskSpec:
        masked = tuple(sorted(int(i) for i in masked))
        hidden = set(masked)
        visible = tuple(i for i in range(num_patches) if i not in hidden)
        if ratio is None:
            ratio = len(masked) / num_patches
        return cls(masked, visible, num_patches, ratio)


def num_masked(ratio: float, num_patches: int) -> int:
    """``ratio * num_patches`` rounded half-up."""
    return int(math.floor(ratio * num_patches + 0.5))


def sample_batch_ratio(rng: np.random.Generator, lo: float = 0.4, hi: float = 0.6) -> float:
    if not 0 < lo <= hi < 1:
        raise ValueError(f"mask ratio bounds must satisfy 0 < lo <= hi < 1, got [{lo}, {hi}]")
    if lo == hi:
        return float(lo)
    return float(rng.uniform(lo, hi))


def sample_mask(rng: np.random.Generator, num_patches: int, ratio: float) -> MaskSpec:
    if num_patches < 2:
        raise ValueError(f"need at least 2 patches to mask, got {num_patches}")
    if not 0 < ratio < 1:
        raise ValueError(f"mask ratio must lie in (0, 1), got {ratio}")
    k = num_masked(ratio, num_patches)
    if not 1 <= k <= num_patches - 1:
        raise ValueError(
            f"ratio {ratio} on {num_patches} patches masks {k}; need between 1 and {num_patches - 1}"
        )
    order = np.arange(num_patches)
    for i in range(k):
        j = int(rng.integers(i, num_patches))
        order[i], order[j] = order[j], order[i]
    return MaskSpec.from_masked(order[:k], num_patches, ratio)


def sample_batch_masks(
    rng: np.random.Generator, batch_size: int, num_patches: int, lo: float = 0.4, hi: float = 0.6
) -> list[MaskSpec]:
    ratio = sample_batch_ratio(rng, lo, hi)
    return [sample_mask(rng, num_patches, ratio) for _ in range(batch_size)]
