"""Poisson-Gaussian corruption model and noise-parameter sampling.

Corruption is ``y = x + sqrt(a*x + sigma^2) * n`` with ``n ~ N(0, I)``: the
Poissonian component is realized through its Gaussian approximation with
signal-dependent variance, never as integer Poisson draws.  ``y`` is not
clipped; clipping belongs to image export only, because it would distort the
noise statistics the model is trained on.

Naming convention used throughout the package: "poisson" noise at level t
means params (a=t, sigma=0); "gaussian" at level t means (a=0, sigma=t).

All randomness flows through counter-based Philox generators derived from an
explicit seed and a named stream path, so every experiment is replayable.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .engine.tensor import NumericsError, Tensor, strict_numerics

__all__ = [
    "NoiseParams",
    "NoiseDistribution",
    "NOISE_KINDS",
    "params_for_level",
    "rng_stream",
    "variance_map",
    "corrupt",
    "corrupt_batch",
    "sample_params",
    "sample_params_batch",
    "residual_noise_std",
]

NOISE_KINDS = ("gaussian", "poisson")


@dataclass(frozen=True)
class NoiseParams:
    """Poissonian parameter ``a`` and Gaussian standard deviation ``sigma``."""

    a: float = 0.0
    sigma: float = 0.0

    def __post_init__(self):
        if self.a < 0 or self.sigma < 0:
            raise ValueError(f"noise parameters must be non-negative, got {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.a, self.sigma], dtype=np.float32)


@dataclass(frozen=True)
class NoiseDistribution:
    """Independent uniform distributions over ``a`` and ``sigma``."""

    a_range: tuple[float, float] = (0.0, 0.0)
    sigma_range: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        for name, (lo, hi) in (("a_range", self.a_range), ("sigma_range", self.sigma_range)):
            if lo < 0 or lo > hi:
                raise ValueError(f"{name} must satisfy 0 <= lo <= hi, got ({lo}, {hi})")

    @property
    def is_degenerate(self) -> bool:
        """True when both ranges are single points (fixed-noise training)."""
        return self.a_range[0] == self.a_range[1] and self.sigma_range[0] == self.sigma_range[1]

    def fixed_params(self) -> NoiseParams:
        if not self.is_degenerate:
            raise ValueError(f"{self} is not degenerate")
        return NoiseParams(self.a_range[0], self.sigma_range[0])


def params_for_level(kind: str, level: float) -> NoiseParams:
    """Map a single sweep level to NoiseParams under the named kind."""
    if kind == "gaussian":
        return NoiseParams(0.0, float(level))
    if kind == "poisson":
        return NoiseParams(float(level), 0.0)
    raise ValueError(f"unknown noise kind {kind!r}, expected one of {NOISE_KINDS}")


def rng_stream(seed: int, *path) -> np.random.Generator:
    """A Philox generator for the stream named by ``path`` under ``seed``.

    Distinct paths give statistically independent streams; the same
    (seed, path) always gives the same stream on any platform.
    """
    key = tuple(zlib.crc32(str(part).encode("utf-8")) for part in path)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy=int(seed), spawn_key=key)))


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def variance_map(x, p: NoiseParams) -> np.ndarray:
    """Elementwise noise variance ``a*x + sigma^2``.

    In strict-numerics mode, negative entries in ``x`` (outside the nominal
    [0,1] intensity domain) raise, since they would make the variance
    ill-defined for a > 0.
    """
    xd = _as_array(x)
    if strict_numerics() and xd.size and float(xd.min()) < 0:
        raise NumericsError(
            f"variance_map input has negative entries (min {float(xd.min()):g}); "
            "intensities must lie in [0, 1]"
        )
    return p.a * xd + p.sigma * p.sigma


def corrupt(x, p: NoiseParams, rng: np.random.Generator) -> np.ndarray:
    """One stochastic corruption ``x + sqrt(a*x + sigma^2) * N(0, I)``, unclipped."""
    xd = _as_array(x)
    noise = rng.standard_normal(xd.shape, dtype=xd.dtype if xd.dtype == np.float32 else np.float64)
    return xd + np.sqrt(variance_map(xd, p)) * noise


def corrupt_batch(x: np.ndarray, a: np.ndarray, sigma: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Corrupt a batch (N, ...) where example i uses params (a[i], sigma[i])."""
    x = np.asarray(x)
    a = np.asarray(a, dtype=x.dtype)
    sigma = np.asarray(sigma, dtype=x.dtype)
    if a.shape != (x.shape[0],) or sigma.shape != (x.shape[0],):
        raise ValueError(
            f"per-example parameter vectors must have shape ({x.shape[0]},), "
            f"got {a.shape} and {sigma.shape}"
        )
    if a.size and (a.min() < 0 or sigma.min() < 0):
        raise ValueError("noise parameters must be non-negative")
    expand = (slice(None),) + (None,) * (x.ndim - 1)
    var = a[expand] * x + (sigma * sigma)[expand]
    noise = rng.standard_normal(x.shape, dtype=x.dtype if x.dtype == np.float32 else np.float64)
    return x + np.sqrt(var) * noise


def sample_params(d: NoiseDistribution, rng: np.random.Generator) -> NoiseParams:
    """One independent uniform draw from each range (``a`` drawn first)."""
    a = rng.uniform(d.a_range[0], d.a_range[1])
    sigma = rng.uniform(d.sigma_range[0], d.sigma_range[1])
    return NoiseParams(float(a), float(sigma))


def sample_params_batch(d: NoiseDistribution, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized draws: returns float32 vectors (a[n], sigma[n]); ``a`` drawn first."""
    a = rng.uniform(d.a_range[0], d.a_range[1], size=n)
    sigma = rng.uniform(d.sigma_range[0], d.sigma_range[1], size=n)
    return a.astype(np.float32), sigma.astype(np.float32)


def residual_noise_std(denoised, clean) -> float:
    """Standard deviation of (denoised - clean); a constant offset contributes 0."""
    d = _as_array(denoised)
    c = _as_array(clean)
    if d.shape != c.shape:
        raise ValueError(f"shape mismatch: {d.shape} vs {c.shape}")
    return float(np.std(np.asarray(d, dtype=np.float64) - np.asarray(c, dtype=np.float64)))
