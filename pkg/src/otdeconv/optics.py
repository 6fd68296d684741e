"""PSF kernels: scalar Born & Wolf diffraction model, Gaussian stand-in, smoothing.

Every kernel returned here is a :class:`~otdeconv.simulate.Volume` in the
physical (convolution) orientation, normalized to unit sum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .volume import Volume

__all__ = [
    "PsfSpec",
    "bessel_j0",
    "born_wolf_psf",
    "born_wolf_field",
    "gaussian_psf",
    "smooth_kernel",
    "kernel_center_of_mass",
    "kernel_correlation",
    "fwhm_along",
]

_SERIES_LIMIT = 8.0
_ASYMPTOTIC_LIMIT = 20.0


def _j0_series(z: np.ndarray) -> np.ndarray:
    q = -0.25 * z * z
    term = np.ones_like(z)
    total = term.copy()
    for k in range(1, 60):
        term = term * q / (k * k)
        total += term
    return total


def _j0_miller(z: np.ndarray) -> np.ndarray:
    # Backward recurrence from an order well above z, normalized through
    # J0 + 2*sum(J_2k) = 1.
    top = int(z.max()) + 40
    top += top % 2
    nxt = np.zeros_like(z)
    cur = np.full_like(z, 1e-30)
    norm = np.zeros_like(z)
    for n in range(top, 0, -1):
        prev = (2.0 * n / z) * cur - nxt
        nxt, cur = cur, prev
        if n - 1 > 0 and (n - 1) % 2 == 0:
            norm += 2.0 * cur
        big = np.abs(cur) > 1e200
        if big.any():
            scale = np.where(big, 1e-200, 1.0)
            cur *= scale
            nxt *= scale
            norm *= scale
    return cur / (norm + cur)


def _j0_hankel(z: np.ndarray) -> np.ndarray:
    p = np.zeros_like(z)
    q = np.zeros_like(z)
    term = np.ones_like(z)
    last = np.full_like(z, np.inf)
    live = np.ones(z.shape, dtype=bool)
    for m in range(40):
        if m:
            term = term * (2 * m - 1) ** 2 / (m * 8.0 * z)
        # stop each lane at its smallest term (optimal truncation)
        live &= term < last
        last = np.where(live, term, last)
        half = m // 2
        if m % 2 == 0:
            p += np.where(live, (-1.0) ** half * term, 0.0)
        else:
            q -= np.where(live, (-1.0) ** half * term, 0.0)
    chi = z - 0.25 * math.pi
    return np.sqrt(2.0 / (math.pi * z)) * (p * np.cos(chi) - q * np.sin(chi))


def bessel_j0(z) -> np.ndarray:
    """Bessel function of the first kind, order zero, to about 1e-14 absolute.

    Power series below 8, Miller backward recurrence on [8, 20), Hankel
    asymptotic expansion from 20 up.
    """
    z = np.abs(np.asarray(z, dtype=np.float64))
    out = np.empty_like(z)
    small = z < _SERIES_LIMIT
    large = z >= _ASYMPTOTIC_LIMIT
    mid = ~(small | large)
    if small.any():
        out[small] = _j0_series(z[small])
    if mid.any():
        out[mid] = _j0_miller(z[mid])
    if large.any():
        out[large] = _j0_hankel(z[large])
    return out


@dataclass(frozen=True)
class PsfSpec:
    """Optical parameters of the scalar diffraction model.

    Lengths are in meters; ``voxel_size`` and ``extent`` are ``(z, y, x)``.
    """

    wavelength: float
    numerical_aperture: float
    refractive_index: float
    voxel_size: tuple[float, float, float]
    extent: tuple[int, int, int] = (31, 31, 31)
    quadrature_points: int = 512

    def __post_init__(self):
        if not self.wavelength > 0:
            raise ConfigError("wavelength must be positive")
        if not 0 < self.numerical_aperture < self.refractive_index:
            raise ConfigError("need 0 < NA < refractive index")
        if len(self.voxel_size) != 3 or any(not v > 0 for v in self.voxel_size):
            raise ConfigError("voxel sizes must be three positive lengths")
        if len(self.extent) != 3 or any(e < 1 or e % 2 == 0 for e in self.extent):
            raise ConfigError(f"kernel extents must be odd, got {self.extent}")
        if self.quadrature_points < 64 or self.quadrature_points % 2:
            raise ConfigError("quadrature_points must be an even number >= 64")

    @property
    def wavenumber(self) -> float:
        return 2.0 * math.pi / self.wavelength


def simpson_weights(panels: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights of composite Simpson on [0, 1] with ``panels`` panels."""
    nodes = np.linspace(0.0, 1.0, panels + 1)
    weights = np.ones(panels + 1)
    weights[1:-1:2] = 4.0
    weights[2:-1:2] = 2.0
    return nodes, weights / (3.0 * panels)


def born_wolf_field(spec: PsfSpec, r_lateral, r_axial, nodes=None, weights=None) -> np.ndarray:
    """Complex pupil integral at physical offsets (meters), before ``|.|**2``.

    ``r_lateral`` and ``r_axial`` broadcast against each other.
    """
    if nodes is None:
        nodes, weights = simpson_weights(spec.quadrature_points)
    k = spec.wavenumber
    ratio = spec.numerical_aperture / spec.refractive_index
    r_lat = np.asarray(r_lateral, dtype=np.float64)[..., None]
    r_ax = np.asarray(r_axial, dtype=np.float64)[..., None]
    bessel = bessel_j0(k * ratio * nodes * r_lat)
    phase = -0.5 * k * nodes**2 * r_ax * ratio**2
    amp = bessel * nodes * weights
    return (amp * np.cos(phase)).sum(-1) + 1j * (amp * np.sin(phase)).sum(-1)


def born_wolf_psf(spec: PsfSpec, normalize: bool = True) -> Volume:
    """Sample the Born & Wolf intensity PSF on the voxel grid of ``spec``.

    The field depends on the lateral radius only, so it is evaluated once per
    distinct ``ix**2 + iy**2`` and scattered back onto the grid.
    """
    kd, kh, kw = spec.extent
    vz, vy, vx = spec.voxel_size
    iy = np.arange(kh) - kh // 2
    ix = np.arange(kw) - kw // 2
    r2 = (iy[:, None] * vy) ** 2 + (ix[None, :] * vx) ** 2
    uniq, inverse = np.unique(r2, return_inverse=True)
    # evaluate only rz >= 0; the field at -rz is the complex conjugate
    nz = kd // 2 + 1
    field = born_wolf_field(spec, np.sqrt(uniq)[None, :], (np.arange(nz) * vz)[:, None])
    intensity_half = np.abs(field) ** 2
    plane = intensity_half[:, inverse.reshape(kh, kw)]
    data = np.concatenate([plane[:0:-1], plane], axis=0)
    if normalize:
        data = data / data.sum()
    return Volume(data, voxel_size=tuple(spec.voxel_size))


def gaussian_psf(sigma, extent, voxel_size=None) -> Volume:
    """Separable sampled Gaussian with per-axis ``sigma`` in voxels, unit sum."""
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (3,))
    extent = tuple(int(e) for e in np.broadcast_to(np.asarray(extent), (3,)))
    if any(not s > 0 for s in sigma):
        raise ConfigError("sigma must be positive")
    if any(e < 1 or e % 2 == 0 for e in extent):
        raise ConfigError(f"kernel extents must be odd, got {extent}")
    axes = []
    for s, e in zip(sigma, extent):
        t = np.arange(e) - e // 2
        g = np.exp(-0.5 * (t / s) ** 2)
        axes.append(g / g.sum())
    data = axes[0][:, None, None] * axes[1][None, :, None] * axes[2][None, None, :]
    return Volume(data / data.sum(), voxel_size=voxel_size)


def smooth_kernel(kernel: Volume, sigma: float = 1.0) -> Volume:
    """Gaussian-smooth a kernel inside its own support.

    Zero padding outside the support; the result is rescaled to the input's
    total mass, and at the edges each voxel is divided by the Gaussian mass
    that landed inside the support so flat fields stay flat.
    """
    data = np.asarray(kernel.data, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise ConfigError("kernel contains non-finite values")
    radius = max(1, int(math.ceil(4 * sigma)))
    out = data
    coverage = np.ones_like(data)
    t = np.arange(-radius, radius + 1)
    g = np.exp(-0.5 * (t / sigma) ** 2)
    g /= g.sum()
    for axis in range(3):
        out = _convolve_axis(out, g, axis)
        coverage = _convolve_axis(coverage, g, axis)
    out = out / coverage
    total = data.sum()
    s = out.sum()
    if s != 0:
        out = out * (total / s)
    return Volume(out, voxel_size=kernel.voxel_size)


def _convolve_axis(a: np.ndarray, g: np.ndarray, axis: int) -> np.ndarray:
    radius = len(g) // 2
    a = np.moveaxis(a, axis, -1)
    n = a.shape[-1]
    padded = np.zeros(a.shape[:-1] + (n + 2 * radius,))
    padded[..., radius:radius + n] = a
    out = np.zeros_like(a)
    for i, w in enumerate(g):
        out += w * padded[..., i:i + n]
    return np.moveaxis(out, -1, axis)


def kernel_center_of_mass(kernel: Volume | np.ndarray) -> np.ndarray:
    """Intensity-weighted centroid in voxel coordinates, relative to the center.

    Negative entries of a learned kernel are clipped to zero first.
    """
    data = np.clip(np.asarray(getattr(kernel, "data", kernel), dtype=np.float64), 0, None)
    total = data.sum()
    if total <= 0:
        raise ConfigError("kernel has no positive mass")
    grids = np.indices(data.shape).astype(np.float64)
    centers = (np.array(data.shape) - 1) / 2.0
    return np.array([(g * data).sum() / total for g in grids]) - centers


def kernel_correlation(a, b) -> float:
    """Pearson correlation between two kernels of equal extent."""
    x = np.asarray(getattr(a, "data", a), dtype=np.float64).ravel()
    y = np.asarray(getattr(b, "data", b), dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ConfigError("kernels must share extents")
    x = x - x.mean()
    y = y - y.mean()
    denom = math.sqrt(float(x @ x) * float(y @ y))
    if denom == 0:
        return 1.0 if np.array_equal(x, y) else 0.0
    return float(x @ y) / denom


def fwhm_along(kernel: Volume | np.ndarray, axis: int) -> float:
    """Full width at half maximum (voxels) of the profile through the peak."""
    data = np.asarray(getattr(kernel, "data", kernel), dtype=np.float64)
    peak = np.unravel_index(np.argmax(data), data.shape)
    index = list(peak)
    index[axis] = slice(None)
    profile = data[tuple(index)]
    half = profile.max() / 2.0
    c = int(np.argmax(profile))
    left = c
    while left > 0 and profile[left - 1] >= half:
        left -= 1
    right = c
    while right < len(profile) - 1 and profile[right + 1] >= half:
        right += 1

    def cross(i_in, i_out):
        a, b = profile[i_in], profile[i_out]
        return i_in + (i_out - i_in) * (a - half) / (a - b)

    lo = cross(left, left - 1) if left > 0 else float(left)
    hi = cross(right, right + 1) if right < len(profile) - 1 else float(right)
    return float(hi - lo)
