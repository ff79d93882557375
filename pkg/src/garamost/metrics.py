"""Image quality metrics for interpolated frames.

SSIM follows the classic single-scale definition: an 11 x 11 Gaussian window
(sigma 1.5), K1 = 0.01, K2 = 0.03 on a dynamic range of 1.0, averaged over
the valid window positions and reported x100 (the common angiography-paper
convention). PSNR is 10 log10(1 / MSE), capped at 99 dB for near-identical
frames.
"""

from __future__ import annotations

import csv

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = ["ssim", "psnr", "aggregate", "write_metrics_csv",
           "SSIM_WINDOW", "SSIM_SIGMA"]

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
_K1 = 0.01
_K2 = 0.03
_RANGE = 1.0

CSV_HEADER = ["sample", "frame_t", "ssim", "psnr"]


def _gaussian_window():
    half = (SSIM_WINDOW - 1) / 2.0
    x = np.arange(SSIM_WINDOW, dtype=np.float64) - half
    g = np.exp(-(x * x) / (2.0 * SSIM_SIGMA * SSIM_SIGMA))
    w = np.outer(g, g)
    return w / w.sum()


_WINDOW = _gaussian_window()


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"frame shapes differ: {a.shape} vs {b.shape}")
    if a.ndim != 2:
        raise ValueError(f"expected 2-D frames, got shape {a.shape}")
    return a, b


def ssim(a, b):
    """Mean SSIM over valid 11 x 11 windows, scaled by 100."""
    a, b = _check_pair(a, b)
    k = SSIM_WINDOW
    if a.shape[0] < k or a.shape[1] < k:
        raise ValueError(
            f"frames must be at least {k}x{k} for SSIM, got {a.shape}"
        )
    w = _WINDOW.ravel()
    wa = sliding_window_view(a, (k, k)).reshape(-1, k * k)
    wb = sliding_window_view(b, (k, k)).reshape(-1, k * k)
    mu_a = wa @ w
    mu_b = wb @ w
    # Weighted second moments; variances via E[x^2] - E[x]^2.
    var_a = (wa * wa) @ w - mu_a * mu_a
    var_b = (wb * wb) @ w - mu_b * mu_b
    cov = (wa * wb) @ w - mu_a * mu_b
    c1 = (_K1 * _RANGE) ** 2
    c2 = (_K2 * _RANGE) ** 2
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return 100.0 * float(np.mean(num / den))


def psnr(a, b):
    """Peak signal-to-noise ratio in dB against a dynamic range of 1.0."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return 99.0
    return min(10.0 * np.log10(1.0 / mse), 99.0)


def aggregate(values):
    """(mean, population std) of a non-empty list of metric values."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("aggregate needs at least one value")
    return float(v.mean()), float(v.std())


def write_metrics_csv(path, rows):
    """Write per-frame rows [(sample, frame_t, ssim, psnr), ...] as CSV."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_HEADER)
        for sample, frame_t, s, p in rows:
            writer.writerow([sample, f"{frame_t:.6f}", f"{s:.6f}", f"{p:.6f}"])
