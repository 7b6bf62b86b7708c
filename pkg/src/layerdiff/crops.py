"""Coordinated crop planning across pyramid levels.

A plan is anchored by one half-extent square at the base (lowest)
resolution. Every higher level's image rectangle is the base rectangle
with coordinates and extents doubled per level, so a factor-2 downsample
of a level's crop is exactly the next level's crop (block means commute
with even-aligned crops). Inside the network the same base rectangle is
applied to the base-resolution trunk immediately before the first
upsampling convolution; after that upsample the trunk already covers the
doubled rectangle, so later stages need no further cropping.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np

__all__ = ["Rect", "CropPlan", "make_crop_plan", "crop_array"]

Rect = Tuple[int, int, int, int]  # x, y, w, h


def _scale(rect: Rect, factor: int) -> Rect:
    x, y, w, h = rect
    return (x * factor, y * factor, w * factor, h * factor)


@dataclass(frozen=True)
class CropPlan:
    """Crop rectangles for one training example.

    base_rect is in base-resolution coordinates. image_rects maps pyramid
    level (0 = highest resolution, num_levels-1 = base) to the rectangle
    cropped out of that level's image; the base level itself is never
    cropped (its rect is the full extent). feature_rect is the in-network
    crop applied to the base trunk before the first upsampling conv.
    """

    base_res: int
    num_levels: int
    base_rect: Rect

    def __post_init__(self):
        x, y, w, h = self.base_rect
        if w <= 0 or h <= 0 or x < 0 or y < 0:
            raise ValueError(f"degenerate base rect {self.base_rect}")
        if x + w > self.base_res or y + h > self.base_res:
            raise ValueError(
                f"base rect {self.base_rect} exceeds base res {self.base_res}"
            )
        if any(v % 2 for v in self.base_rect) and not self.is_full:
            raise ValueError(f"crop coordinates must be even: {self.base_rect}")

    @property
    def is_full(self) -> bool:
        return self.base_rect == (0, 0, self.base_res, self.base_res)

    @property
    def image_rects(self) -> Dict[int, Rect]:
        k = self.num_levels - 1
        rects = {k: (0, 0, self.base_res, self.base_res)}
        for level in range(k - 1, -1, -1):
            rects[level] = _scale(self.base_rect, 2 ** (k - level))
        return rects

    @property
    def feature_rect(self) -> Rect:
        return self.base_rect

    @classmethod
    def full(cls, base_res: int, num_levels: int) -> "CropPlan":
        return cls(base_res, num_levels, (0, 0, base_res, base_res))


def make_crop_plan(rng: np.random.Generator, base_res: int, num_levels: int,
                   crop_fraction: float = 0.5) -> CropPlan:
    """Uniformly random even-aligned square crop of half the base extent."""
    if base_res % 2:
        raise ValueError("base_res must be even")
    size = int(round(base_res * crop_fraction))
    size -= size % 2
    if size < 2:
        raise ValueError(f"crop size too small at base_res {base_res}")
    max_off = (base_res - size) // 2
    x = 2 * int(rng.integers(0, max_off + 1))
    y = 2 * int(rng.integers(0, max_off + 1))
    return CropPlan(base_res, num_levels, (x, y, size, size))


def crop_array(arr: np.ndarray, rect: Rect) -> np.ndarray:
    """Crop the trailing two axes (rows = y, cols = x)."""
    x, y, w, h = rect
    if y + h > arr.shape[-2] or x + w > arr.shape[-1]:
        raise ValueError(f"rect {rect} outside array {arr.shape}")
    return arr[..., y : y + h, x : x + w]
