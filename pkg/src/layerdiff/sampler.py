"""Deterministic DDIM-style sampling from a layered model.

Latents start as the sinc-consistent noise pyramid and are stepped along
each level's shifted schedule. In "per-level-latents" mode every level's
latent evolves with its own output convolution; in "top-only" mode only
the top latent evolves and the lower-level inputs are re-synthesized each
step from the previous top prediction (downsampled estimate plus
sinc-downsampled noise estimate).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from .data import encode_png, tokenize
from .noise import NoiseField, bilinear_downsample, build_noise_pyramid, sinc_downsample
from .schedule import T_EPS
from .tensor import Tensor
from .train import level_coefficients
from .unet import LayeredModel

__all__ = ["SamplerConfig", "sample", "sample_grid"]

MODES = ("per-level-latents", "top-only")
SIGMA_FLOOR = 1e-8


@dataclass(frozen=True)
class SamplerConfig:
    caption: str = ""
    num_steps: int = 256
    mode: str = "per-level-latents"
    seed: int = 0
    shifts: tuple = (1.0,)
    shift_multiplier: float = 2.0
    stochastic: bool = False
    churn: float = 0.5  # fresh-noise mixing weight when stochastic

    def __post_init__(self):
        if self.num_steps < 2:
            raise ValueError("num_steps must be >= 2")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if not 0.0 <= self.churn <= 1.0:
            raise ValueError("churn must lie in [0, 1]")
        object.__setattr__(self, "shifts", tuple(float(s) for s in self.shifts))


def _shift_cfg(cfg: SamplerConfig, num_levels: int):
    from .schedule import ShiftConfig

    shifts = cfg.shifts
    if len(shifts) != num_levels:
        shifts = ShiftConfig.defaults(num_levels).shifts
    return ShiftConfig(shifts=shifts, multiplier=cfg.shift_multiplier)


def _fresh_pyramid(rng: np.random.Generator, shape, num_levels: int,
                   dtype) -> List[np.ndarray]:
    eps = NoiseField(rng.standard_normal(shape), seed=int(rng.integers(2**62)))
    pyr = build_noise_pyramid(eps, num_levels)
    return [lvl.data.astype(dtype) for lvl in pyr.levels]


def sample(model: LayeredModel, cfg: SamplerConfig,
           record_stats: bool = False
           ) -> np.ndarray | Tuple[np.ndarray, List[List[float]]]:
    """One image [C, H, W] in [-1, 1]; bit-deterministic for a fixed seed.

    With record_stats, also returns per-step lists of per-level latent
    standard deviations (a divergence diagnostic).
    """
    mc = model.config
    num_levels = mc.num_levels
    dtype = mc.dtype
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    shape = (1, mc.channels, mc.resolutions[0], mc.resolutions[0])
    init = _fresh_pyramid(rng, shape, num_levels, dtype)
    tokens = tokenize(cfg.caption)[None]

    ts = np.linspace(1.0 - T_EPS, T_EPS, cfg.num_steps)
    alphas, sigmas = level_coefficients(ts, num_levels, _shift_cfg(cfg, num_levels))
    alphas = alphas.astype(dtype)
    sigmas = np.maximum(sigmas, SIGMA_FLOOR).astype(dtype)

    latents = [z.copy() for z in init]
    x_top = np.zeros(shape, dtype=dtype)
    eps_top = init[0]
    stats: List[List[float]] = []

    for s in range(cfg.num_steps):
        if cfg.mode == "top-only" and s > 0:
            for i in range(1, num_levels):
                latents[i] = (
                    alphas[i, s] * bilinear_downsample(x_top, 2**i)
                    + sigmas[i, s] * sinc_downsample(eps_top, 2**i)
                ).astype(dtype)
        if record_stats:
            stats.append([float(z.std()) for z in latents])
        t_arr = np.full((1,), ts[s])
        preds = model.forward(
            [Tensor(z) for z in latents], t_arr, tokens)
        x_hats = [p.data for p in preds]
        eps_hats = [
            (latents[i] - alphas[i, s] * x_hats[i]) / sigmas[i, s]
            for i in range(num_levels)
        ]
        x_top, eps_top = x_hats[0], eps_hats[0]
        if s == cfg.num_steps - 1:
            break
        if cfg.stochastic and cfg.churn > 0.0:
            fresh = _fresh_pyramid(rng, shape, num_levels, dtype)
            keep = math.sqrt(1.0 - cfg.churn**2)
            eps_hats = [
                keep * e + cfg.churn * f for e, f in zip(eps_hats, fresh)
            ]
            eps_top = eps_hats[0]
        upto = 1 if cfg.mode == "top-only" else num_levels
        for i in range(upto):
            latents[i] = (
                alphas[i, s + 1] * x_hats[i] + sigmas[i, s + 1] * eps_hats[i]
            ).astype(dtype)

    image = np.clip(x_top[0], -1.0, 1.0)
    return (image, stats) if record_stats else image


def sample_grid(model: LayeredModel, captions: List[str], cfg: SamplerConfig,
                out_path: str, samples_per_caption: int = 1,
                gutter: int = 2) -> np.ndarray:
    """Render a PNG grid: one row per caption, one column per sample seed.

    Returns the [3, rows*H + gutters, cols*W + gutters] grid array that was
    written (values in [-1, 1]).
    """
    if not captions:
        raise ValueError("captions must be nonempty")
    if samples_per_caption < 1:
        raise ValueError("samples_per_caption must be >= 1")
    mc = model.config
    h = w = mc.resolutions[0]
    rows, cols = len(captions), samples_per_caption
    grid = np.full(
        (mc.channels, rows * h + (rows - 1) * gutter,
         cols * w + (cols - 1) * gutter),
        -1.0, dtype=np.float32)
    from dataclasses import replace

    for r, caption in enumerate(captions):
        for c in range(cols):
            img = sample(model, replace(cfg, caption=caption, seed=cfg.seed + c))
            y, x = r * (h + gutter), c * (w + gutter)
            grid[:, y : y + h, x : x + w] = img
    encode_png(grid, out_path)
    return grid
