"""Poisson-Gaussian corruption statistics and parameter sampling."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from film_denoise.engine import NumericsError, set_strict_numerics
from film_denoise.noise import (
    NoiseDistribution,
    NoiseParams,
    corrupt,
    corrupt_batch,
    params_for_level,
    residual_noise_std,
    rng_stream,
    sample_params,
    sample_params_batch,
    variance_map,
)


def test_params_validate_signs():
    with pytest.raises(ValueError):
        NoiseParams(a=-0.1, sigma=0.0)
    with pytest.raises(ValueError):
        NoiseParams(a=0.0, sigma=-1.0)


def test_params_for_level_maps_kinds():
    assert params_for_level("poisson", 0.3) == NoiseParams(a=0.3, sigma=0.0)
    assert params_for_level("gaussian", 0.3) == NoiseParams(a=0.0, sigma=0.3)
    with pytest.raises(ValueError):
        params_for_level("salt", 0.3)


def test_variance_map_reference_point():
    x = np.full((8, 8), 0.5)
    out = variance_map(x, NoiseParams(a=0.2, sigma=0.1))
    np.testing.assert_allclose(out, 0.11, rtol=1e-12)


def test_variance_map_pure_gaussian():
    x = np.random.default_rng(0).random((4, 4))
    out = variance_map(x, NoiseParams(a=0.0, sigma=0.25))
    np.testing.assert_allclose(out, 0.0625, rtol=1e-12)


def test_variance_map_zero_at_origin():
    assert np.all(variance_map(np.zeros((3, 3)), NoiseParams(a=0.4, sigma=0.0)) == 0.0)


def test_variance_map_strict_mode_rejects_negative_intensity():
    set_strict_numerics(True)
    try:
        with pytest.raises(NumericsError):
            variance_map(np.array([-0.01, 0.5]), NoiseParams(a=0.3, sigma=0.0))
    finally:
        set_strict_numerics(False)


def test_corrupt_zero_noise_is_bit_exact():
    x = np.random.default_rng(1).random((3, 16, 16)).astype(np.float32)
    y = corrupt(x, NoiseParams(0.0, 0.0), rng_stream(0, "t"))
    assert y.tobytes() == x.tobytes()


def test_corrupt_monte_carlo_variance_and_mean():
    x = np.full(10 ** 6, 0.5, dtype=np.float32)
    y = corrupt(x, NoiseParams(a=0.2, sigma=0.1), rng_stream(7, "mc"))
    residual = (y - x).astype(np.float64)
    var = residual.var()
    assert abs(var - 0.11) / 0.11 < 0.01
    assert abs(residual.mean()) < 3.0 * np.sqrt(0.11 / 10 ** 6)


def test_corrupt_variance_bucketed_by_intensity():
    p = NoiseParams(a=0.3, sigma=0.05)
    rng = rng_stream(11, "buckets")
    for level in (0.1, 0.5, 0.9):
        x = np.full(10 ** 6, level, dtype=np.float32)
        var = (corrupt(x, p, rng) - x).astype(np.float64).var()
        expected = 0.3 * level + 0.05 ** 2
        assert abs(var - expected) / expected < 0.01


def test_corrupt_same_seed_bit_identical():
    x = np.random.default_rng(2).random((2, 3, 8, 8)).astype(np.float32)
    p = NoiseParams(0.1, 0.2)
    y1 = corrupt(x, p, rng_stream(42, "a", "b"))
    y2 = corrupt(x, p, rng_stream(42, "a", "b"))
    assert np.array_equal(y1, y2)
    y3 = corrupt(x, p, rng_stream(42, "a", "c"))
    assert not np.array_equal(y1, y3)


def test_corrupt_is_not_clipped():
    x = np.zeros(10 ** 4, dtype=np.float32)
    y = corrupt(x, NoiseParams(0.0, 0.5), rng_stream(3, "clip"))
    assert (y < 0).any()  # negative excursions survive


def test_corrupt_batch_matches_per_example_params():
    x = np.random.default_rng(4).random((4, 3, 8, 8)).astype(np.float32)
    a = np.array([0.0, 0.1, 0.2, 0.3], dtype=np.float32)
    s = np.array([0.3, 0.2, 0.1, 0.0], dtype=np.float32)
    y = corrupt_batch(x, a, s, rng_stream(5, "batch"))
    assert y.shape == x.shape
    # the zero-noise combination would need a=sigma=0; none here, so all differ
    for i in range(4):
        assert not np.array_equal(y[i], x[i])


def test_sample_params_degenerate_ranges():
    d = NoiseDistribution(a_range=(0.25, 0.25), sigma_range=(0.5, 0.5))
    assert d.is_degenerate
    p = sample_params(d, rng_stream(0, "s"))
    assert p == NoiseParams(0.25, 0.5)


def test_sample_params_uniform_mean():
    d = NoiseDistribution(a_range=(0.0, 1.0), sigma_range=(0.0, 1.0))
    a, s = sample_params_batch(d, 10 ** 5, rng_stream(9, "mean"))
    assert abs(a.mean() - 0.5) < 0.01
    assert abs(s.mean() - 0.5) < 0.01


@settings(max_examples=25, deadline=None)
@given(
    a_lo=st.floats(0.0, 0.5), a_span=st.floats(0.0, 0.5),
    s_lo=st.floats(0.0, 0.5), s_span=st.floats(0.0, 0.5),
    seed=st.integers(0, 2 ** 32 - 1),
)
def test_sampled_params_stay_inside_ranges(a_lo, a_span, s_lo, s_span, seed):
    d = NoiseDistribution(a_range=(a_lo, a_lo + a_span), sigma_range=(s_lo, s_lo + s_span))
    a, s = sample_params_batch(d, 64, rng_stream(seed, "prop"))
    assert np.all((a >= a_lo) & (a <= a_lo + a_span))
    assert np.all((s >= s_lo) & (s <= s_lo + s_span))


def test_distribution_validates_ranges():
    with pytest.raises(ValueError):
        NoiseDistribution(a_range=(0.5, 0.1), sigma_range=(0.0, 0.0))
    with pytest.raises(ValueError):
        NoiseDistribution(a_range=(-0.1, 0.1), sigma_range=(0.0, 0.0))


def test_residual_std_zero_for_identical():
    x = np.random.default_rng(6).random((3, 8, 8))
    assert residual_noise_std(x, x) == 0.0


def test_residual_std_ignores_constant_offset():
    x = np.random.default_rng(7).random((3, 8, 8))
    assert residual_noise_std(x + 0.2, x) < 1e-7  # std, not RMSE


def test_residual_std_recovers_noise_level():
    clean = np.random.default_rng(8).random(10 ** 6).astype(np.float32) * 0.5 + 0.25
    noisy = corrupt(clean, NoiseParams(0.0, 0.1), rng_stream(10, "res"))
    est = residual_noise_std(noisy, clean)
    assert abs(est - 0.1) / 0.1 < 0.02


def test_residual_std_shape_mismatch():
    with pytest.raises(ValueError):
        residual_noise_std(np.zeros((2, 2)), np.zeros((3, 2)))


def test_rng_stream_path_sensitivity():
    base = rng_stream(1, "x").random(4)
    assert np.array_equal(base, rng_stream(1, "x").random(4))
    assert not np.array_equal(base, rng_stream(2, "x").random(4))
    assert not np.array_equal(base, rng_stream(1, "y").random(4))
    assert not np.array_equal(base, rng_stream(1, "x", 0).random(4))
