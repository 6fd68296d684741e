"""Synthetic filament phantoms, forward blur + noise, patch crop/merge, datasets."""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, ShapeError
from .metrics import measure_avg_snr, psnr
from .volume import Volume, file_digest, read_volume, write_volume

__all__ = [
    "Volume", "NoiseSpec", "Patch", "Dataset",
    "make_phantom", "blur", "add_noise", "crop_patches", "merge_patches",
    "random_patch", "augment_patch", "draw_augmentation", "apply_augmentation", "grid_origins", "generate_dataset", "volume_rng",
]

_FILAMENT_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))  # 1 voxel FWHM


def volume_rng(seed: int, index: int, stream: str = "") -> np.random.Generator:
    """Independent generator for volume ``index`` under master ``seed``."""
    key = [int(seed), int(index)] + [ord(c) for c in stream]
    return np.random.default_rng(np.random.SeedSequence(key))


def _bezier(ctrl: np.ndarray, t: np.ndarray) -> np.ndarray:
    u = 1.0 - t
    basis = np.stack([u ** 3, 3 * u * u * t, 3 * u * t * t, t ** 3], axis=1)
    return basis @ ctrl


def make_phantom(extents=(32, 32, 32), n_filaments: int = 5, seed: int = 0, margin: float = 0.0,
                 voxel_size=None) -> Volume:
    """Render random cubic Bezier filaments with a Gaussian cross-section.

    Each filament gets a uniform intensity in [0.5, 1]; overlapping filaments
    combine by maximum, so values stay in [0, 1].  Control points are drawn
    inside ``[margin, extent - 1 - margin]`` on every axis.
    """
    extents = tuple(int(e) for e in extents)
    if len(extents) != 3 or any(e < 16 for e in extents):
        raise ConfigError(f"phantom extents must be >= 16 per axis, got {extents}")
    if n_filaments < 1:
        raise ConfigError("n_filaments must be at least 1")
    if any(2 * margin >= e - 1 for e in extents):
        raise ConfigError("margin leaves no room for filaments")
    rng = np.random.default_rng(seed)
    hi = np.array(extents, dtype=np.float64) - 1.0 - margin
    out = np.zeros(extents)
    reach = int(math.ceil(4 * _FILAMENT_SIGMA))
    offsets = np.stack(np.meshgrid(*(np.arange(-reach, reach + 1),) * 3, indexing="ij"), -1).reshape(-1, 3)
    for _ in range(n_filaments):
        ctrl = rng.uniform(margin, hi, size=(4, 3))
        intensity = rng.uniform(0.5, 1.0)
        length = np.linalg.norm(np.diff(ctrl, axis=0), axis=1).sum()
        pts = _bezier(ctrl, np.linspace(0.0, 1.0, max(16, int(length / 0.1))))
        vox = np.rint(pts).astype(np.int64)[:, None, :] + offsets[None, :, :]
        vox = vox.reshape(-1, 3)
        d2 = ((vox - np.repeat(pts, len(offsets), axis=0)) ** 2).sum(1)
        inside = np.all((vox >= 0) & (vox < np.array(extents)), axis=1)
        vox, d2 = vox[inside], d2[inside]
        flat = np.ravel_multi_index(vox.T, extents)
        best = np.full(out.size, np.inf)
        np.minimum.at(best, flat, d2)
        contrib = intensity * np.exp(-0.5 * best / _FILAMENT_SIGMA ** 2)
        out = np.maximum(out, contrib.reshape(extents))
    return Volume(out, voxel_size=voxel_size)


def blur(x: Volume, h: Volume) -> Volume:
    """Zero-padded 'same' convolution ``h * x``."""
    kd = np.asarray(h.data)
    if any(k % 2 == 0 for k in kd.shape):
        raise ShapeError(f"kernel extents must be odd, got {kd.shape}")
    if any(k > n for k, n in zip(kd.shape, x.shape)):
        raise ShapeError(f"kernel {kd.shape} larger than volume {x.shape}")
    out = ndimage.convolve(x.data, kd, mode="constant", cval=0.0)
    return Volume(out, voxel_size=x.voxel_size)


@dataclass(frozen=True)
class NoiseSpec:
    """Poisson-then-Gaussian noise calibrated to an average SNR.

    ``poisson_peak_photons`` is the expected photon count at the brightest
    voxel.  If ``gaussian_fraction`` is set, the photon count is instead
    chosen so that Poisson noise carries ``1 - gaussian_fraction`` of the
    target noise power.
    """

    target_avg_snr_db: float = 20.0
    poisson_peak_photons: float = 1000.0
    gaussian_fraction: float | None = None
    seed: int = 0

    def __post_init__(self):
        if math.isnan(self.target_avg_snr_db):
            raise ConfigError("target SNR is NaN")
        if not self.poisson_peak_photons > 0 or not math.isfinite(self.poisson_peak_photons):
            raise ConfigError("poisson_peak_photons must be positive and finite")
        if self.gaussian_fraction is not None and not 0 < self.gaussian_fraction <= 1:
            raise ConfigError("gaussian_fraction must lie in (0, 1]")


def add_noise(g: Volume, spec: NoiseSpec, rng: np.random.Generator | None = None,
              tol_db: float = 1e-3) -> tuple[Volume, float]:
    """Corrupt ``g`` with Poisson then Gaussian noise; return ``(y, achieved_avg_snr_db)``.

    The Gaussian standard deviation is found by bisection on the measured
    average SNR, with the Poisson and standard-normal draws held fixed.
    """
    data = g.data
    if np.any(data < 0):
        raise ConfigError("add_noise needs a nonnegative volume")
    if math.isinf(spec.target_avg_snr_db) and spec.target_avg_snr_db > 0:
        return g.copy(), math.inf
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    signal = float((data * data).sum())
    peak = float(data.max())
    if signal == 0:
        raise ConfigError("cannot calibrate SNR on an all-zero volume")
    target_power = signal / 10.0 ** (spec.target_avg_snr_db / 10.0)
    photons = spec.poisson_peak_photons
    if spec.gaussian_fraction is not None:
        if spec.gaussian_fraction >= 1:
            photons = math.inf
        else:
            # Poisson variance per voxel is g * peak / photons
            photons = peak * float(data.sum()) / ((1.0 - spec.gaussian_fraction) * target_power)
    if math.isinf(photons):
        y1 = data.copy()
    else:
        y1 = rng.poisson(data * (photons / peak)).astype(np.float64) * (peak / photons)
    z = rng.standard_normal(data.shape)
    base = y1 - data
    p0 = float((base * base).sum())
    if p0 > target_power:
        ceiling = 10.0 * math.log10(signal / p0) if p0 > 0 else math.inf
        raise ConfigError(
            f"target {spec.target_avg_snr_db:.3f} dB exceeds the Poisson-only SNR of {ceiling:.3f} dB; "
            "raise poisson_peak_photons")

    def snr(sigma):
        r = base + sigma * z
        return 10.0 * math.log10(signal / float((r * r).sum()))

    lo, hi = 0.0, math.sqrt(target_power / data.size)
    while snr(hi) > spec.target_avg_snr_db:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if snr(mid) > spec.target_avg_snr_db:
            lo = mid
        else:
            hi = mid
        if abs(snr(mid) - spec.target_avg_snr_db) < tol_db and hi - lo < 1e-3 * hi:
            break
    sigma = 0.5 * (lo + hi)
    y = base + sigma * z + data
    return Volume(y, voxel_size=g.voxel_size), measure_avg_snr(g, Volume(y))


# ------------------------------------------------------------------ patches

@dataclass
class Patch:
    origin: tuple[int, int, int]
    data: np.ndarray


def grid_origins(n: int, patch: int, stride: int) -> list[int]:
    """Start positions along one axis; the last window is pinned to the edge."""
    if patch > n:
        raise ShapeError(f"patch {patch} larger than extent {n}")
    if stride < 1:
        raise ConfigError("stride must be positive")
    starts = list(range(0, n - patch + 1, stride))
    if starts[-1] != n - patch:
        starts.append(n - patch)
    return starts


def draw_augmentation(rng: np.random.Generator) -> tuple[tuple[bool, bool, bool], int]:
    """Random axis flips and a lateral quarter-turn count."""
    flips = tuple(bool(rng.random() < 0.5) for _ in range(3))
    return flips, int(rng.integers(4))


def apply_augmentation(p: np.ndarray, aug) -> np.ndarray:
    flips, k = aug
    for axis, f in enumerate(flips):
        if f:
            p = np.flip(p, axis=axis)
    if p.shape[1] == p.shape[2]:
        p = np.rot90(p, k=k, axes=(1, 2))
    return np.ascontiguousarray(p)


def augment_patch(p: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random axis flips and a random multiple of 90 degrees in the lateral plane."""
    return apply_augmentation(p, draw_augmentation(rng))


def crop_patches(v: Volume, patch, stride=None, augment: bool = False, seed: int = 0) -> list[Patch]:
    """Tile ``v`` into ``patch``-sized blocks on a ``stride`` grid covering every voxel."""
    patch = tuple(int(p) for p in np.broadcast_to(np.asarray(patch), (3,)))
    stride = patch if stride is None else tuple(int(s) for s in np.broadcast_to(np.asarray(stride), (3,)))
    axes = [grid_origins(n, p, s) for n, p, s in zip(v.shape, patch, stride)]
    rng = np.random.default_rng(seed)
    out = []
    for z in axes[0]:
        for y in axes[1]:
            for x in axes[2]:
                block = v.data[z:z + patch[0], y:y + patch[1], x:x + patch[2]].copy()
                if augment:
                    block = augment_patch(block, rng)
                out.append(Patch((z, y, x), block))
    return out


def random_patch(volumes, patch: int, rng: np.random.Generator, augment: bool = True,
                 index: int | None = None) -> tuple[int, tuple, np.ndarray]:
    """Draw one random crop; returns ``(volume_index, origin, block)``."""
    i = int(rng.integers(len(volumes))) if index is None else index
    data = volumes[i].data if isinstance(volumes[i], Volume) else volumes[i]
    origin = tuple(int(rng.integers(n - patch + 1)) for n in data.shape)
    block = data[tuple(slice(o, o + patch) for o in origin)]
    return i, origin, (augment_patch(block, rng) if augment else block.copy())


def _ramp(n: int, overlap: int, left_open: bool, right_open: bool) -> np.ndarray:
    w = np.ones(n)
    if overlap > 0:
        ramp = (np.arange(overlap) + 1.0) / (overlap + 1.0)
        m = min(overlap, n)
        if left_open:
            w[:m] = np.minimum(w[:m], ramp[:m])
        if right_open:
            w[n - m:] = np.minimum(w[n - m:], ramp[:m][::-1])
    return w


def merge_patches(patches, extents, overlap: int = 8) -> Volume:
    """Blend patches by linearly feathered weights normalized to a partition of unity.

    Feathering only applies on patch faces that lie inside the volume.
    """
    extents = tuple(int(e) for e in extents)
    if overlap < 0:
        raise ConfigError("overlap must be nonnegative")
    acc = np.zeros(extents)
    wsum = np.zeros(extents)
    for p in patches:
        data = np.asarray(p.data, dtype=np.float64)
        o = p.origin
        if any(a < 0 or a + n > e for a, n, e in zip(o, data.shape, extents)):
            raise ShapeError(f"patch at {o} with shape {data.shape} exceeds extents {extents}")
        ws = [_ramp(n, overlap, a > 0, a + n < e) for a, n, e in zip(o, data.shape, extents)]
        w = ws[0][:, None, None] * ws[1][None, :, None] * ws[2][None, None, :]
        sl = tuple(slice(a, a + n) for a, n in zip(o, data.shape))
        acc[sl] += w * data
        wsum[sl] += w
    gaps = np.argwhere(wsum == 0)
    if len(gaps):
        raise ShapeError(f"patches leave voxel {tuple(int(i) for i in gaps[0])} uncovered")
    return Volume(acc / wsum)


# ------------------------------------------------------------------ datasets

@dataclass
class Dataset:
    """Sharp (X) and blurred (Y) collections.

    When ``paired`` is False the trainer draws X and Y indices independently.
    """

    sharp: list[Volume]
    blurred: list[Volume]
    paired: bool = False
    seed: int = 0
    names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.sharp or not self.blurred:
            raise ConfigError("dataset needs at least one volume per domain")
        if self.paired and len(self.sharp) != len(self.blurred):
            raise ConfigError("paired dataset needs equally many sharp and blurred volumes")

    @classmethod
    def load(cls, root, paired: bool = False) -> "Dataset":
        root = Path(root)
        manifest = json.loads((root / "dataset.json").read_text())
        sharp = [read_volume(root / e["sharp"]) for e in manifest["volumes"]]
        blurred = [read_volume(root / e["blurred"]) for e in manifest["volumes"]]
        if not paired:
            order = manifest["unpaired"]
            sharp = [sharp[i] for i in order["sharp"]]
            blurred = [blurred[i] for i in order["blurred"]]
        return cls(sharp, blurred, paired=paired, seed=manifest.get("seed", 0),
                   names=[e["name"] for e in manifest["volumes"]])


def _simulate_one(seed, index, extents, n_filaments, kernel, noise: NoiseSpec, margin):
    phantom_seed = int(volume_rng(seed, index, "phantom").integers(2 ** 31))
    x = make_phantom(extents, n_filaments, phantom_seed, margin=margin, voxel_size=kernel.voxel_size)
    g = blur(x, kernel)
    if math.isinf(noise.target_avg_snr_db):
        return x, g, math.inf, math.inf
    y, snr = add_noise(g, noise, rng=volume_rng(seed, index, "noise"))
    return x, y, snr, psnr(g, y, 1.0)


def generate_dataset(out_dir, n_volumes: int, kernel: Volume, noise: NoiseSpec, seed: int = 0,
                     extents=(32, 32, 32), n_filaments: int = 8, margin: float = 0.0,
                     threads: int = 1) -> dict:
    """Write paired sharp/blurred OTDV files plus ``dataset.json``; return the manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    work = lambda i: _simulate_one(seed, i, extents, n_filaments, kernel, noise, margin)  # noqa: E731
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(work, range(n_volumes)))
    else:
        results = [work(i) for i in range(n_volumes)]
    entries = []
    for i, (x, y, snr, peak) in enumerate(results):
        name = f"vol_{i:03d}"
        write_volume(out_dir / f"{name}_sharp.otdv", x)
        write_volume(out_dir / f"{name}_blurred.otdv", y)
        entries.append({
            "name": name,
            "sharp": f"{name}_sharp.otdv",
            "blurred": f"{name}_blurred.otdv",
            "sharp_sha256": file_digest(out_dir / f"{name}_sharp.otdv"),
            "blurred_sha256": file_digest(out_dir / f"{name}_blurred.otdv"),
            "avg_snr_db": snr if math.isfinite(snr) else "inf",
            "peak_snr_db": peak if math.isfinite(peak) else "inf",
        })
    shuffle = np.random.default_rng(np.random.SeedSequence([seed, 0xD47A]))
    manifest = {
        "seed": seed,
        "extents": list(extents),
        "n_filaments": n_filaments,
        "noise": {"target_avg_snr_db": noise.target_avg_snr_db if math.isfinite(noise.target_avg_snr_db) else "inf",
                  "poisson_peak_photons": noise.poisson_peak_photons,
                  "gaussian_fraction": noise.gaussian_fraction},
        "volumes": entries,
        "unpaired": {"sharp": shuffle.permutation(n_volumes).tolist(),
                     "blurred": shuffle.permutation(n_volumes).tolist()},
    }
    (out_dir / "dataset.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest
