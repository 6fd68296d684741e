"""PSNR, windowed SSIM and average SNR on volumes."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError


def _arr(v) -> np.ndarray:
    return np.asarray(getattr(v, "data", v), dtype=np.float64)


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"extents differ: {a.shape} vs {b.shape}")


def psnr(x, x_hat, max_value: float = 1.0) -> float:
    """``10 log10(MAX**2 / MSE)`` over all voxels; ``inf`` when identical."""
    a, b = _arr(x), _arr(x_hat)
    _same_shape(a, b)
    if not max_value > 0:
        raise ConfigError("max_value must be positive")
    err = float(((a - b) ** 2).mean())
    if err == 0:
        return math.inf
    return 10.0 * math.log10(max_value ** 2 / err)


def _box_sums(a: np.ndarray, w: int) -> np.ndarray:
    """Sum over every fully-contained ``w**3`` window (valid positions, stride 1)."""
    c = np.pad(a, [(1, 0)] * 3).cumsum(0).cumsum(1).cumsum(2)
    return (c[w:, w:, w:] - c[:-w, w:, w:] - c[w:, :-w, w:] - c[w:, w:, :-w]
            + c[:-w, :-w, w:] + c[:-w, w:, :-w] + c[w:, :-w, :-w] - c[:-w, :-w, :-w])


def ssim_map(x, x_hat, window: int = 8, dynamic_range: float = 1.0,
             k1: float = 0.01, k2: float = 0.03) -> np.ndarray:
    """Local SSIM at every valid position of a uniform ``window**3`` box.

    Window statistics use population (1/N) moments.
    """
    a, b = _arr(x), _arr(x_hat)
    _same_shape(a, b)
    if a.ndim != 3:
        raise ShapeError("ssim expects 3-D volumes")
    if any(window > n for n in a.shape):
        raise ConfigError(f"SSIM window {window} exceeds volume extents {a.shape}")
    if not dynamic_range > 0:
        raise ConfigError("dynamic range must be positive")
    n = float(window ** 3)
    mu_a = _box_sums(a, window) / n
    mu_b = _box_sums(b, window) / n
    var_a = np.maximum(_box_sums(a * a, window) / n - mu_a ** 2, 0.0)
    var_b = np.maximum(_box_sums(b * b, window) / n - mu_b ** 2, 0.0)
    cov = _box_sums(a * b, window) / n - mu_a * mu_b
    c1 = (k1 * dynamic_range) ** 2
    c2 = (k2 * dynamic_range) ** 2
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))


def ssim(x, x_hat, window: int = 8, dynamic_range: float = 1.0) -> float:
    return float(ssim_map(x, x_hat, window, dynamic_range).mean())


def measure_avg_snr(clean, noisy) -> float:
    """``10 log10(sum(clean**2) / sum((noisy - clean)**2))``."""
    a, b = _arr(clean), _arr(noisy)
    _same_shape(a, b)
    noise = float(((b - a) ** 2).sum())
    if noise == 0:
        return math.inf
    return 10.0 * math.log10(float((a * a).sum()) / noise)


@dataclass
class MetricReport:
    psnr_db: float
    ssim: float
    avg_snr_db: float | None = None
    per_slice_psnr: list[float] | None = None

    @classmethod
    def compute(cls, reference, estimate, max_value: float = 1.0, window: int = 8,
                per_slice: bool = False) -> "MetricReport":
        ref, est = _arr(reference), _arr(estimate)
        slices = [psnr(ref[i], est[i], max_value) for i in range(ref.shape[0])] if per_slice else None
        return cls(psnr(ref, est, max_value), ssim(ref, est, window, max_value),
                   measure_avg_snr(ref, est), slices)
