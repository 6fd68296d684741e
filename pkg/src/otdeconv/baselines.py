"""Model-based deconvolution: Richardson-Lucy and TV-regularized least squares."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigError, NumericalError
from .volume import Volume

TV_EPS = 1e-6


def _kernel(h) -> np.ndarray:
    k = np.asarray(getattr(h, "data", h), dtype=np.float64)
    if k.ndim != 3:
        raise ConfigError(f"kernel must be 3-D, got shape {k.shape}")
    return k


def _forward(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    return ndimage.convolve(x, k, mode="constant", cval=0.0)


def _adjoint(r: np.ndarray, k: np.ndarray) -> np.ndarray:
    return ndimage.correlate(r, k, mode="constant", cval=0.0)


def richardson_lucy(y: Volume, h, iterations: int = 50, eps: float = 1e-12, callback=None) -> Volume:
    """Multiplicative Poisson-likelihood updates starting from the data mean."""
    k = _kernel(h)
    data = np.asarray(y.data, dtype=np.float64)
    if iterations < 1:
        raise ConfigError("iterations must be >= 1")
    if (data < 0).any() or (k < 0).any():
        raise ConfigError("Richardson-Lucy needs nonnegative data and kernel")
    if abs(k.sum() - 1.0) > 1e-6:
        raise ConfigError(f"kernel must have unit sum, got {k.sum():.6g}")
    x = np.full(data.shape, data.mean())
    for i in range(iterations):
        ratio = data / np.maximum(_forward(x, k), eps)
        x = x * _adjoint(ratio, k)
        if callback is not None:
            callback(i + 1, x)
    return Volume(x, voxel_size=y.voxel_size)


@dataclass(frozen=True)
class PlsConfig:
    regularizer: str = "tv"
    lam: float = 1e-3
    step_size: float | None = None
    iterations: int = 100
    nonneg_projection: bool = True
    init: str = "y"
    eps_tv: float = TV_EPS

    def __post_init__(self):
        if self.regularizer not in ("tv", "none"):
            raise ConfigError("regularizer must be 'tv' or 'none'")
        if self.step_size is not None and not self.step_size > 0:
            raise ConfigError("step_size must be positive")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.lam < 0 or not self.eps_tv > 0:
            raise ConfigError("lam must be >= 0 and eps_tv > 0")
        if self.init not in ("y", "zeros"):
            raise ConfigError("init must be 'y' or 'zeros'")


def _grad3(x: np.ndarray) -> list[np.ndarray]:
    # forward differences, zero across the far boundary
    out = []
    for axis in range(3):
        d = np.zeros_like(x)
        sl_hi = [slice(None)] * 3
        sl_lo = [slice(None)] * 3
        sl_hi[axis] = slice(1, None)
        sl_lo[axis] = slice(None, -1)
        d[tuple(sl_lo)] = x[tuple(sl_hi)] - x[tuple(sl_lo)]
        out.append(d)
    return out


def _grad3_adjoint(parts: list[np.ndarray]) -> np.ndarray:
    out = np.zeros_like(parts[0])
    for axis, p in enumerate(parts):
        sl_hi = [slice(None)] * 3
        sl_lo = [slice(None)] * 3
        sl_hi[axis] = slice(1, None)
        sl_lo[axis] = slice(None, -1)
        q = p.copy()
        # only differences that were actually formed contribute
        last = [slice(None)] * 3
        last[axis] = slice(-1, None)
        q[tuple(last)] = 0.0
        out[tuple(sl_hi)] += q[tuple(sl_lo)]
        out -= q
    return out


def tv_value(x: np.ndarray, eps: float = TV_EPS) -> float:
    gz, gy, gx = _grad3(x)
    return float(np.sqrt(gz * gz + gy * gy + gx * gx + eps * eps).sum())


def pls_objective(x: np.ndarray, y: np.ndarray, h, cfg: PlsConfig) -> float:
    k = _kernel(h)
    r = _forward(x, k) - y
    value = float((r * r).sum())
    if cfg.regularizer == "tv" and cfg.lam:
        value += cfg.lam * tv_value(x, cfg.eps_tv)
    return value


def pls_gradient(x: np.ndarray, y: np.ndarray, h, cfg: PlsConfig) -> np.ndarray:
    k = _kernel(h)
    g = 2.0 * _adjoint(_forward(x, k) - y, k)
    if cfg.regularizer == "tv" and cfg.lam:
        parts = _grad3(x)
        mag = np.sqrt(sum(p * p for p in parts) + cfg.eps_tv ** 2)
        g = g + cfg.lam * _grad3_adjoint([p / mag for p in parts])
    return g


def lipschitz_bound(h, shape, cfg: PlsConfig, iterations: int = 50, seed: int = 0) -> float:
    """``2 ||H||^2`` by power iteration plus ``lam * 12 / eps`` for the smoothed TV term."""
    k = _kernel(h)
    v = np.random.default_rng(seed).standard_normal(tuple(shape))
    v /= np.linalg.norm(v)
    sigma2 = 0.0
    for _ in range(iterations):
        w = _adjoint(_forward(v, k), k)
        sigma2 = float(np.linalg.norm(w))
        if sigma2 == 0:
            break
        v = w / sigma2
    # power iteration approaches from below; pad slightly
    bound = 2.0 * sigma2 * 1.01
    if cfg.regularizer == "tv":
        bound += cfg.lam * 12.0 / cfg.eps_tv
    return bound


def tv_pls(y: Volume, h, cfg: PlsConfig = PlsConfig(), history: list | None = None) -> Volume:
    """Gradient descent on ``||y - h*x||^2 + lam * TV_eps(x)``.

    ``step_size=None`` uses ``0.9 / L`` with ``L`` from :func:`lipschitz_bound`.
    Objective values per iterate are appended to ``history`` when given.
    """
    data = np.asarray(y.data, dtype=np.float64)
    k = _kernel(h)
    step = cfg.step_size if cfg.step_size is not None else 0.9 / lipschitz_bound(k, data.shape, cfg)
    x = data.copy() if cfg.init == "y" else np.zeros_like(data)
    if cfg.nonneg_projection:
        x = np.maximum(x, 0.0)
    if history is not None:
        history.append(pls_objective(x, data, k, cfg))
    for _ in range(cfg.iterations):
        x = x - step * pls_gradient(x, data, k, cfg)
        if cfg.nonneg_projection:
            x = np.maximum(x, 0.0)
        if history is not None:
            f = pls_objective(x, data, k, cfg)
            if not math.isfinite(f):
                raise NumericalError("tv_pls objective became non-finite; reduce step_size")
            history.append(f)
    return Volume(x, voxel_size=y.voxel_size)
