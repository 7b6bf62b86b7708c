"""Cosine log-SNR schedule with per-level shifts.

lambda(t) = -2*log(tan(pi*t/2)), variance-preserving: alpha = sqrt(sigmoid
(lambda)), sigma = sqrt(sigmoid(-lambda)). Higher-resolution levels run a
shifted copy lambda + multiplier*log(s) with s <= 1, which delays them
toward noisier states so coarse structure settles first. Shift indices
count from the lowest-resolution (base) level: shifts[0] is always 1.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import List

import numpy as np

__all__ = [
    "SchedulePoint",
    "ShiftConfig",
    "cosine_logsnr",
    "shifted_logsnr",
    "shifted_point",
    "schedule_table",
    "table_to_csv",
    "table_from_csv",
    "T_EPS",
]

T_EPS = 1e-5


@dataclass(frozen=True)
class SchedulePoint:
    t: float
    level: int  # depth index: 0 = lowest resolution
    lam: float
    alpha: float
    sigma: float

    def __post_init__(self):
        gap = abs(self.alpha**2 + self.sigma**2 - 1.0)
        if gap > 1e-9:
            raise ValueError(f"alpha^2 + sigma^2 != 1 (off by {gap:.2e})")


@dataclass(frozen=True)
class ShiftConfig:
    """Per-level schedule scale factors, base level first.

    shifts[j] applies to the level j steps above the base resolution;
    shifts[0] must be 1 and the sequence must be non-increasing (higher
    resolutions get delayed at least as much as lower ones). multiplier
    selects between lambda + 2*ln(s) (default) and lambda + ln(s).
    """

    shifts: tuple = (1.0,)
    multiplier: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "shifts", tuple(float(s) for s in self.shifts))
        if not self.shifts or self.shifts[0] != 1.0:
            raise ValueError("shifts[0] (base level) must be 1.0")
        for s_prev, s in zip(self.shifts, self.shifts[1:]):
            if not (0.0 < s <= 1.0):
                raise ValueError(f"shift {s} outside (0, 1]")
            if s > s_prev:
                raise ValueError("shifts must be non-increasing toward higher levels")

    @classmethod
    def defaults(cls, num_levels: int) -> "ShiftConfig":
        """1, 1/8, 1/32, then halving twice per extra level."""
        base = [1.0, 1.0 / 8.0, 1.0 / 32.0]
        while len(base) < num_levels:
            base.append(base[-1] / 4.0)
        return cls(shifts=tuple(base[:num_levels]))

    @property
    def num_levels(self) -> int:
        return len(self.shifts)


def _clamp_t(t: float) -> float:
    if t < 0.0 or t > 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    return min(max(t, T_EPS), 1.0 - T_EPS)


def cosine_logsnr(t: float) -> float:
    """Unshifted cosine schedule in log-SNR form; strictly decreasing."""
    t = _clamp_t(t)
    return -2.0 * math.log(math.tan(math.pi * t / 2.0))


def shifted_logsnr(t: float, level: int, cfg: ShiftConfig) -> float:
    if not (0 <= level < cfg.num_levels):
        raise ValueError(f"level {level} outside shift config (0..{cfg.num_levels - 1})")
    return cosine_logsnr(t) + cfg.multiplier * math.log(cfg.shifts[level])


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def shifted_point(t: float, level: int, cfg: ShiftConfig) -> SchedulePoint:
    lam = shifted_logsnr(t, level, cfg)
    alpha = math.sqrt(_sigmoid(lam))
    sigma = math.sqrt(_sigmoid(-lam))
    return SchedulePoint(t=_clamp_t(t), level=level, lam=lam, alpha=alpha, sigma=sigma)


def schedule_table(num_steps: int, cfg: ShiftConfig) -> List[List[SchedulePoint]]:
    """Per-level lists of points on a uniform t grid over [eps, 1-eps]."""
    if num_steps < 2:
        raise ValueError("num_steps must be >= 2")
    ts = np.linspace(T_EPS, 1.0 - T_EPS, num_steps)
    return [
        [shifted_point(float(t), level, cfg) for t in ts]
        for level in range(cfg.num_levels)
    ]


_CSV_COLUMNS = ["step", "t", "level", "lambda", "alpha", "sigma"]


def table_to_csv(table: List[List[SchedulePoint]], fp) -> None:
    """One row per (step, level); floats are round-trip exact (repr)."""
    writer = csv.writer(fp)
    writer.writerow(_CSV_COLUMNS)
    for level, points in enumerate(table):
        for step, p in enumerate(points):
            writer.writerow(
                [step, repr(p.t), level, repr(p.lam), repr(p.alpha), repr(p.sigma)]
            )


def table_from_csv(fp) -> List[List[SchedulePoint]]:
    reader = csv.reader(fp)
    header = next(reader)
    if header != _CSV_COLUMNS:
        raise ValueError(f"unexpected schedule CSV header: {header}")
    by_level: dict[int, list] = {}
    for row in reader:
        step, t, level, lam, alpha, sigma = row
        by_level.setdefault(int(level), []).append(
            (int(step), SchedulePoint(
                t=float(t), level=int(level), lam=float(lam),
                alpha=float(alpha), sigma=float(sigma),
            ))
        )
    table = []
    for level in sorted(by_level):
        rows = sorted(by_level[level], key=lambda r: r[0])
        table.append([p for _, p in rows])
    return table
