"""Noise pyramid: whiteness, linearity, nesting, and contrast properties."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from layerdiff.noise import (NoiseField, bilinear_downsample,
                             build_noise_pyramid, sample_gaussian,
                             sinc_downsample, sinc_downsample_reference)


def test_sample_gaussian_deterministic_per_seed():
    a = sample_gaussian(1, 8, 8, seed=7)
    b = sample_gaussian(1, 8, 8, seed=7)
    c = sample_gaussian(1, 8, 8, seed=8)
    assert np.array_equal(a.data, b.data)
    assert not np.array_equal(a.data, c.data)


def test_sample_gaussian_moments_large_sample():
    # law-of-large-numbers bound at ~3 sigma for 10^6 draws
    field = sample_gaussian(1, 100, 100, seed=0, batch=100)
    flat = field.data.ravel()
    assert flat.size == 10**6
    assert abs(flat.mean()) < 0.01
    assert 0.99 < flat.var() < 1.01


def test_sinc_downsample_output_stays_unit_variance():
    fields = sample_gaussian(1, 16, 16, seed=1, batch=2000)
    down = sinc_downsample(fields.data, 2)
    flat = down.reshape(2000, -1)
    var = flat.var(axis=0, ddof=1)
    assert var.min() > 0.9 and var.max() < 1.1
    corr = np.corrcoef(flat, rowvar=False)
    off = corr[~np.eye(64, dtype=bool)]
    assert np.abs(off).mean() < 0.05


def test_sinc_downsample_constant_passthrough_unnormalized():
    const = np.full((1, 1, 8, 8), 3.5)
    out = sinc_downsample(const, 2, renormalize=False)
    assert np.allclose(out, 3.5, atol=1e-12)


def test_bilinear_contrast_loss_is_one_over_factor_squared():
    rng = np.random.default_rng(2)
    noise = rng.standard_normal((500, 1, 16, 16))
    for factor in (2, 4):
        down = bilinear_downsample(noise, factor)
        assert abs(down.var() - 1.0 / factor**2) < 0.03 / factor


def test_bilinear_downsample_block_mean_oracle():
    x = np.arange(16, dtype=np.float64).reshape(1, 4, 4)
    got = bilinear_downsample(x, 2)
    want = np.array([[[2.5, 4.5], [10.5, 12.5]]])
    assert np.array_equal(got, want)


@settings(max_examples=25, deadline=None)
@given(st.floats(-3, 3, allow_nan=False), st.floats(-3, 3, allow_nan=False),
       st.integers(0, 1000))
def test_sinc_downsample_is_linear(a, b, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 8, 8))
    y = rng.standard_normal((1, 8, 8))
    lhs = sinc_downsample(a * x + b * y, 2)
    rhs = a * sinc_downsample(x, 2) + b * sinc_downsample(y, 2)
    assert np.allclose(lhs, rhs, atol=1e-5)


def test_pyramid_single_shot_equals_composed():
    eps0 = sample_gaussian(3, 32, 32, seed=4)
    pyr = build_noise_pyramid(eps0, 3)
    assert [lvl.data.shape[-1] for lvl in pyr.levels] == [32, 16, 8]
    direct = sinc_downsample(eps0.data, 4)
    assert np.allclose(pyr.levels[2].data, direct, atol=1e-10)


def test_pyramid_level0_is_input():
    eps0 = sample_gaussian(1, 16, 16, seed=5)
    pyr = build_noise_pyramid(eps0, 2)
    assert np.array_equal(pyr.levels[0].data, eps0.data)


def test_independent_mode_decorrelated_from_sinc_levels():
    eps0 = sample_gaussian(1, 16, 16, seed=6, batch=10**4)
    sinc_lvl = build_noise_pyramid(eps0, 2, mode="sinc").levels[1].data
    ind_lvl = build_noise_pyramid(eps0, 2, mode="independent").levels[1].data
    for pix in ((0, 0), (3, 5), (7, 7)):
        a = sinc_lvl[:, 0, pix[0], pix[1]]
        b = ind_lvl[:, 0, pix[0], pix[1]]
        rho = np.corrcoef(a, b)[0, 1]
        assert abs(rho) < 0.05


def test_independent_mode_unit_variance():
    eps0 = sample_gaussian(1, 16, 16, seed=9, batch=2000)
    lvl = build_noise_pyramid(eps0, 2, mode="independent").levels[1].data
    assert 0.9 < lvl.var() < 1.1


def test_fft_decimation_agrees_with_literal_sinc_sum():
    # truncated spatial sinc kernel approaches the periodic FFT version
    rng = np.random.default_rng(11)
    x = rng.standard_normal((1, 64, 64))
    fft_version = sinc_downsample(x, 2, renormalize=False, nyquist="zero")
    literal = sinc_downsample_reference(x, 2)
    center = (slice(None), slice(8, 24), slice(8, 24))
    assert np.abs(fft_version[center] - literal[center]).max() < 0.35


def test_factor_must_be_power_of_two_and_divide():
    with pytest.raises(ValueError):
        sinc_downsample(np.zeros((1, 8, 8)), 3)
    with pytest.raises(ValueError):
        sinc_downsample(np.zeros((1, 6, 6)), 4)


def test_noise_field_records_seed():
    f = sample_gaussian(1, 8, 8, seed=42)
    assert f.seed == 42
    assert isinstance(f, NoiseField)
