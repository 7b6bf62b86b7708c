"""Noise and image pyramids.

Gaussian noise is sampled once at the top resolution and carried down to
lower resolutions by band-limited (sinc) resampling, implemented in the
frequency domain: on a periodic grid the Whittaker-Shannon interpolation
of a factor-T decimation is exactly a DFT brick-wall lowpass followed by
subsampling. Images are downsampled bilinearly, which on aligned factor-2
grids reduces to block averaging.

The renormalized sinc path is constructed so that white Gaussian input
maps to exactly white Gaussian output: the operator keeps every frequency
the target grid can represent and projects the single ambiguous Nyquist
bin onto its real part with a sqrt(2) gain, giving an orthonormal-like map
per axis. A "zero" Nyquist mode (strictly inside-band retention) is kept
as an alternative; it leaves the output slightly correlated along rows and
columns, which is why it is not the default.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List

import numpy as np

__all__ = [
    "NoiseField",
    "NoisePyramid",
    "ImagePyramid",
    "sample_gaussian",
    "sinc_downsample",
    "sinc_downsample_reference",
    "bilinear_downsample",
    "build_noise_pyramid",
    "build_image_pyramid",
]


@dataclass
class NoiseField:
    """Per-level Gaussian noise; level 0 is the highest resolution."""

    data: np.ndarray  # [..., C, H, W]
    seed: int
    level: int = 0

    @property
    def shape(self):
        return self.data.shape


@dataclass
class NoisePyramid:
    """Noise fields from highest to lowest resolution, factor 2 apart."""

    levels: List[NoiseField]
    factor: int = 2

    def __post_init__(self):
        for a, b in zip(self.levels, self.levels[1:]):
            if (a.data.shape[-1] != b.data.shape[-1] * self.factor
                    or a.data.shape[-2] != b.data.shape[-2] * self.factor):
                raise ValueError(
                    f"levels must shrink by {self.factor}: "
                    f"{a.data.shape} -> {b.data.shape}"
                )

    def __len__(self):
        return len(self.levels)


@dataclass
class ImagePyramid:
    """Ground truth at level 0 plus bilinear downsamples, values in [-1, 1]."""

    levels: List[np.ndarray] = field(default_factory=list)

    def __len__(self):
        return len(self.levels)


def sample_gaussian(channels: int, height: int, width: int, seed: int,
                    batch: int | None = None,
                    dtype=np.float64) -> NoiseField:
    """I.i.d. standard normal field; identical output for identical seed."""
    if channels <= 0 or height <= 0 or width <= 0:
        raise ValueError("dimensions must be positive")
    rng = np.random.Generator(np.random.PCG64(seed))
    shape = (channels, height, width) if batch is None else (
        batch, channels, height, width)
    return NoiseField(rng.standard_normal(shape).astype(dtype), seed=seed, level=0)


def _decimate_axis(arr: np.ndarray, factor: int, axis: int,
                   nyquist: str) -> np.ndarray:
    """Band-limited decimation along one axis, real in and real out.

    Keeps bins |k| < m/2 of the length-n FFT (bin layout [0..n/2-1,
    -n/2..-1]) plus the target Nyquist bin k = m/2, and inverse-transforms
    at the target length m = n // factor. The output is scaled so that
    white input stays white (the map is a coordinate selection between
    orthonormal real DFT bases).
    """
    n = arr.shape[axis]
    m = n // factor
    half = m // 2
    spec = np.fft.fft(arr, axis=axis)

    def take(idx):
        sl = [slice(None)] * spec.ndim
        sl[axis] = idx
        return spec[tuple(sl)]

    low = take(slice(0, half))                  # k = 0 .. m/2-1
    high = take(slice(n - (m - half), n))       # k = -m/2 .. -1
    if nyquist == "real":
        # sqrt(2)*Re keeps the bin's variance and makes the truncated
        # spectrum Hermitian, so the inverse transform is exactly real
        sl = [slice(None)] * spec.ndim
        sl[axis] = slice(half, half + 1)
        nyq = np.sqrt(2.0) * take(slice(half, half + 1)).real
        high = high.copy()
        sl_first = [slice(None)] * spec.ndim
        sl_first[axis] = slice(0, 1)
        high[tuple(sl_first)] = nyq  # bin -m/2 == +m/2 on the target grid
    elif nyquist == "zero":
        high = high.copy()
        sl_first = [slice(None)] * spec.ndim
        sl_first[axis] = slice(0, 1)
        high[tuple(sl_first)] = 0.0
    else:
        raise ValueError(f"unknown nyquist mode: {nyquist}")
    trunc = np.concatenate([low, high], axis=axis)
    out = np.fft.ifft(trunc, axis=axis).real / np.sqrt(factor)
    return out.astype(arr.dtype, copy=False)


def sinc_downsample(eps: NoiseField | np.ndarray, factor: int,
                    renormalize: bool = True,
                    nyquist: str = "real") -> NoiseField | np.ndarray:
    """Ideal-lowpass decimation of the trailing two axes by `factor`.

    Linear, so Gaussian in -> Gaussian out. With renormalize the output
    marginals have unit variance for white input; without it the operation
    matches plain lowpass-then-subsample (constants pass through unchanged,
    white noise loses a 1/factor**2 share of its variance).
    """
    arr = eps.data if isinstance(eps, NoiseField) else np.asarray(eps)
    f = int(factor)
    if f < 1 or (f & (f - 1)) != 0:
        raise ValueError(f"factor must be a positive power of two, got {factor}")
    h, w = arr.shape[-2], arr.shape[-1]
    if h % f or w % f:
        raise ValueError(f"factor {f} does not divide field dims {h}x{w}")
    if f == 1:
        out = arr.copy()
    else:
        out = _decimate_axis(arr, f, arr.ndim - 1, nyquist)
        out = _decimate_axis(out, f, arr.ndim - 2, nyquist)
        if not renormalize:
            out = (out / f).astype(arr.dtype)
    if isinstance(eps, NoiseField):
        return NoiseField(out, seed=eps.seed, level=eps.level)
    return out


def sinc_downsample_reference(eps: np.ndarray, factor: int) -> np.ndarray:
    """Literal truncated spatial sinc sum; slow oracle for tests.

    Evaluates the 2D Whittaker-Shannon kernel at the target grid without the
    periodic wrap, so it only approximates the DFT form away from boundaries.
    Matches the unnormalized (renormalize=False) convention.
    """
    arr = np.asarray(eps, dtype=np.float64)
    h, w = arr.shape[-2], arr.shape[-1]
    t = float(factor)
    mh, mw = h // factor, w // factor
    # target sample (i, j) sits at high-res position (i*T, j*T)
    src = np.arange(h)
    ker_h = np.sinc((np.arange(mh)[:, None] * t - src[None, :]) / t) / t
    src_w = np.arange(w)
    ker_w = np.sinc((np.arange(mw)[:, None] * t - src_w[None, :]) / t) / t
    return np.einsum("is,...st,jt->...ij", ker_h, arr, ker_w, optimize=True)


def bilinear_downsample(image: np.ndarray, factor: int) -> np.ndarray:
    """Block-mean downsampling of the trailing two axes, iterated per octave."""
    arr = np.asarray(image)
    f = int(factor)
    if f < 1 or (f & (f - 1)) != 0:
        raise ValueError(f"factor must be a positive power of two, got {factor}")
    h, w = arr.shape[-2], arr.shape[-1]
    if h % f or w % f:
        raise ValueError(f"factor {f} does not divide image dims {h}x{w}")
    out = arr
    while f > 1:
        h, w = out.shape[-2], out.shape[-1]
        out = out.reshape(*out.shape[:-2], h // 2, 2, w // 2, 2).mean(axis=(-3, -1))
        f //= 2
    return out


def build_noise_pyramid(eps0: NoiseField, num_levels: int,
                        mode: str = "sinc") -> NoisePyramid:
    """Level 0 = eps0; level i = renormalized sinc downsample by 2**i.

    mode="independent" draws a fresh Gaussian per level instead (the
    ablation axis); fields are seeded from eps0.seed and the level index.
    """
    if num_levels < 1:
        raise ValueError("num_levels must be >= 1")
    h, w = eps0.data.shape[-2], eps0.data.shape[-1]
    div = 2 ** (num_levels - 1)
    if h % div or w % div:
        raise ValueError(
            f"top dims {h}x{w} not divisible by 2**{num_levels - 1}"
        )
    levels = [NoiseField(eps0.data, seed=eps0.seed, level=0)]
    for i in range(1, num_levels):
        if mode == "sinc":
            down = sinc_downsample(eps0.data, 2**i, renormalize=True)
        elif mode == "independent":
            rng = np.random.Generator(
                np.random.PCG64(np.random.SeedSequence([eps0.seed & (2**63 - 1), i]))
            )
            down = rng.standard_normal(
                eps0.data.shape[:-2] + (h >> i, w >> i)
            ).astype(eps0.data.dtype)
        else:
            raise ValueError(f"unknown noise mode: {mode}")
        levels.append(NoiseField(down, seed=eps0.seed, level=i))
    return NoisePyramid(levels)


def build_image_pyramid(image: np.ndarray, num_levels: int) -> ImagePyramid:
    """Ground truth plus successive bilinear halvings, range-checked."""
    arr = np.asarray(image)
    if arr.min() < -1.0 - 1e-6 or arr.max() > 1.0 + 1e-6:
        raise ValueError("image values must lie in [-1, 1]")
    levels = [arr]
    for i in range(1, num_levels):
        levels.append(bilinear_downsample(arr, 2**i))
    return ImagePyramid(levels)
