"""Reference image-quality metrics: PSNR and SSIM.

PSNR
    10*log10(peak^2 / MSE) in decibels, computed in float64.  Identical
    images would be +inf, which is capped to the +100 dB sentinel so CSV
    output stays numeric.

SSIM
    Standard structural similarity with an 11x11 Gaussian window (std 1.5),
    K1=0.01, K2=0.03 on unit dynamic range L=1.0.  Statistics use valid
    window positions only (no padding), are computed per channel and then
    averaged across channels.  The fast path vectorizes the windowed moments
    with one sliding-window view per moment; the test suite holds an
    independent brute-force per-window oracle against it.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .engine.tensor import Tensor
from .noise import NOISE_KINDS

__all__ = [
    "PSNR_CAP_DB",
    "SSIM_WINDOW",
    "MetricRecord",
    "psnr",
    "ssim",
    "mean_metrics",
]

PSNR_CAP_DB = 100.0

SSIM_WINDOW_SIZE = 11
SSIM_WINDOW_STD = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_L = 1.0


def _gaussian_window(size: int, std: float) -> np.ndarray:
    offsets = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(offsets * offsets) / (2.0 * std * std))
    w = np.outer(g, g)
    return w / w.sum()


SSIM_WINDOW = _gaussian_window(SSIM_WINDOW_SIZE, SSIM_WINDOW_STD)


@dataclass(frozen=True)
class MetricRecord:
    """One measurement cell: conditioning level, corruption level, kind, scores."""

    sigma_tr: float
    sigma_val: float
    noise_kind: str
    psnr_db: float
    ssim: float
    residual_std: float
    n_images: int = 1

    def __post_init__(self):
        if self.noise_kind not in NOISE_KINDS:
            raise ValueError(f"noise_kind must be one of {NOISE_KINDS}, got {self.noise_kind!r}")
        if self.n_images < 1:
            raise ValueError(f"n_images must be >= 1, got {self.n_images}")
        if not (-1.0 - 1e-9 <= self.ssim <= 1.0 + 1e-9):
            raise ValueError(f"ssim out of [-1, 1]: {self.ssim}")


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def psnr(a, b, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at +100 for (near-)identical images."""
    ad = np.asarray(_as_array(a), dtype=np.float64)
    bd = np.asarray(_as_array(b), dtype=np.float64)
    if ad.shape != bd.shape:
        raise ValueError(f"psnr shape mismatch: {ad.shape} vs {bd.shape}")
    diff = ad - bd
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(peak * peak / mse), PSNR_CAP_DB)


def _ssim_channel(a: np.ndarray, b: np.ndarray) -> float:
    w = SSIM_WINDOW
    k = SSIM_WINDOW_SIZE
    wa = sliding_window_view(a, (k, k))
    wb = sliding_window_view(b, (k, k))
    axes = ([2, 3], [0, 1])
    mu_a = np.tensordot(wa, w, axes=axes)
    mu_b = np.tensordot(wb, w, axes=axes)
    e_aa = np.tensordot(wa * wa, w, axes=axes)
    e_bb = np.tensordot(wb * wb, w, axes=axes)
    e_ab = np.tensordot(wa * wb, w, axes=axes)
    var_a = e_aa - mu_a * mu_a
    var_b = e_bb - mu_b * mu_b
    cov = e_ab - mu_a * mu_b
    c1 = (SSIM_K1 * SSIM_L) ** 2
    c2 = (SSIM_K2 * SSIM_L) ** 2
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(a, b) -> float:
    """Mean SSIM over channels and valid 11x11 window positions.

    Accepts (C, H, W) or a single (H, W) channel; H and W must be at least
    the window size.  Identical inputs return exactly 1.0.
    """
    ad = np.asarray(_as_array(a), dtype=np.float64)
    bd = np.asarray(_as_array(b), dtype=np.float64)
    if ad.shape != bd.shape:
        raise ValueError(f"ssim shape mismatch: {ad.shape} vs {bd.shape}")
    if ad.ndim == 2:
        ad = ad[None]
        bd = bd[None]
    if ad.ndim != 3:
        raise ValueError(f"ssim expects (C, H, W) or (H, W), got shape {ad.shape}")
    h, w = ad.shape[1], ad.shape[2]
    if h < SSIM_WINDOW_SIZE or w < SSIM_WINDOW_SIZE:
        raise ValueError(
            f"image {h}x{w} is smaller than the {SSIM_WINDOW_SIZE}x{SSIM_WINDOW_SIZE} SSIM window"
        )
    per_channel = [_ssim_channel(ad[c], bd[c]) for c in range(ad.shape[0])]
    return float(np.mean(per_channel))


def mean_metrics(records: list[MetricRecord]) -> MetricRecord:
    """Arithmetic mean of every field over records; n_images sums.

    dB values are averaged as dB (curve convention), not pooled through MSE.
    """
    if not records:
        raise ValueError("mean_metrics needs at least one record")
    if len(records) == 1:
        return replace(records[0], n_images=records[0].n_images)
    kinds = {r.noise_kind for r in records}
    if len(kinds) > 1:
        raise ValueError(f"cannot average across noise kinds {sorted(kinds)}")

    def mean(values: list[float]) -> float:
        # the mean of identical values is that value, without rounding drift
        if min(values) == max(values):
            return float(values[0])
        return float(np.mean(values))

    return MetricRecord(
        sigma_tr=mean([r.sigma_tr for r in records]),
        sigma_val=mean([r.sigma_val for r in records]),
        noise_kind=records[0].noise_kind,
        psnr_db=mean([r.psnr_db for r in records]),
        ssim=mean([r.ssim for r in records]),
        residual_std=mean([r.residual_std for r in records]),
        n_images=int(sum(r.n_images for r in records)),
    )
