import math

import numpy as np
import pytest

from otdeconv import tensor as T
from otdeconv.errors import ConfigError, ShapeError
from otdeconv.metrics import measure_avg_snr
from otdeconv.optics import gaussian_psf
from otdeconv.simulate import (Dataset, NoiseSpec, Patch, add_noise, apply_augmentation, blur, crop_patches,
                               draw_augmentation, generate_dataset, grid_origins, make_phantom, merge_patches,
                               random_patch)
from otdeconv.volume import Volume, read_volume


def test_phantom_deterministic_and_bounded():
    a = make_phantom((32, 32, 32), 5, seed=3)
    b = make_phantom((32, 32, 32), 5, seed=3)
    np.testing.assert_array_equal(a.data, b.data)
    assert a.data.min() >= 0 and a.data.max() <= 1
    assert not np.array_equal(a.data, make_phantom((32, 32, 32), 5, seed=4).data)


@pytest.mark.parametrize("seed", range(5))
def test_phantom_sparsity_band(seed):
    frac = float((make_phantom((32, 32, 32), 5, seed=seed).data > 0.1).mean())
    assert 0.001 < frac < 0.3


def test_phantom_filament_peaks_in_intensity_range():
    p = make_phantom((24, 24, 24), 1, seed=0).data
    assert 0.5 <= p.max() <= 1.0


@pytest.mark.parametrize("kwargs", [dict(extents=(8, 32, 32)), dict(n_filaments=0), dict(margin=20)])
def test_phantom_rejects_bad_config(kwargs):
    args = dict(extents=(32, 32, 32), n_filaments=3, seed=0)
    args.update(kwargs)
    with pytest.raises(ConfigError):
        make_phantom(**args)


def test_blur_delta_is_identity():
    x = make_phantom((16, 16, 16), 2, seed=0)
    d = np.zeros((3, 3, 3))
    d[1, 1, 1] = 1
    np.testing.assert_array_equal(blur(x, Volume(d)).data, x.data)


def test_blur_constant_interior():
    k = gaussian_psf(1.0, 5)
    out = blur(Volume(np.full((16, 16, 16), 0.4)), k).data
    np.testing.assert_allclose(out[2:-2, 2:-2, 2:-2], 0.4, atol=1e-12)


def test_blur_matches_tensor_path():
    rng = np.random.default_rng(0)
    x = Volume(rng.random((12, 13, 11)))
    h = Volume(rng.random((5, 3, 7)))
    # blur is a true convolution; conv3 correlates, so flip the kernel
    w = np.ascontiguousarray(h.data[::-1, ::-1, ::-1])[None, None]
    ref = T.conv3(T.Tensor(x.data[None, None]), T.Tensor(w)).data[0, 0]
    np.testing.assert_allclose(blur(x, h).data, ref, atol=1e-12)


def test_blur_preserves_mass_for_interior_support():
    x = make_phantom((32, 32, 32), 4, seed=1, margin=6)
    k = gaussian_psf(1.0, 9)
    assert abs(blur(x, k).data.sum() - x.data.sum()) < 1e-9 * x.data.sum()


def test_blur_shape_errors():
    with pytest.raises(ShapeError):
        blur(Volume(np.zeros((4, 4, 4))), Volume(np.zeros((5, 5, 5))))
    with pytest.raises(ShapeError):
        blur(Volume(np.zeros((8, 8, 8))), Volume(np.zeros((4, 3, 3))))


def test_measured_snr_closed_form():
    g = np.random.default_rng(0).random((6, 6, 6)) + 0.1
    assert measure_avg_snr(g, g + 0.1 * g) == pytest.approx(20.0, abs=1e-12)


def test_noise_disabled_returns_input():
    g = blur(make_phantom((16, 16, 16), 3, seed=0), gaussian_psf(1.0, 5))
    y, snr = add_noise(g, NoiseSpec(math.inf))
    np.testing.assert_array_equal(y.data, g.data)
    assert snr == math.inf


@pytest.mark.parametrize("target", [1.25, 2.5, 5.0, 10.0, 20.0])
def test_noise_calibration(target):
    g = blur(make_phantom((32, 32, 32), 8, seed=11), gaussian_psf(1.2, 9))
    y, snr = add_noise(g, NoiseSpec(target, seed=5))
    assert abs(snr - target) < 0.1
    assert snr == pytest.approx(measure_avg_snr(g, y), abs=1e-12)


def test_noise_deterministic_under_seed():
    g = blur(make_phantom((16, 16, 16), 3, seed=0), gaussian_psf(1.0, 5))
    a, _ = add_noise(g, NoiseSpec(10.0, seed=2))
    b, _ = add_noise(g, NoiseSpec(10.0, seed=2))
    np.testing.assert_array_equal(a.data, b.data)


def test_noise_infeasible_target():
    g = blur(make_phantom((16, 16, 16), 3, seed=0), gaussian_psf(1.0, 5))
    with pytest.raises(ConfigError, match="Poisson-only"):
        add_noise(g, NoiseSpec(60.0, poisson_peak_photons=10.0))


def test_noise_gaussian_fraction_one_is_pure_gaussian():
    g = blur(make_phantom((16, 16, 16), 3, seed=0), gaussian_psf(1.0, 5))
    y, snr = add_noise(g, NoiseSpec(40.0, gaussian_fraction=1.0))
    assert abs(snr - 40.0) < 0.1


def test_noise_rejects_negative_input():
    with pytest.raises(ConfigError):
        add_noise(Volume(-np.ones((4, 4, 4))), NoiseSpec())


def test_grid_origins_pin_last_window():
    assert grid_origins(32, 16, 8) == [0, 8, 16]
    assert grid_origins(30, 16, 8) == [0, 8, 14]
    assert grid_origins(16, 16, 16) == [0]
    with pytest.raises(ShapeError):
        grid_origins(8, 16, 8)


def test_exact_tiling_without_augmentation():
    v = Volume(np.arange(32 ** 3, dtype=float).reshape(32, 32, 32))
    patches = crop_patches(v, 16)
    assert len(patches) == 8
    seen = np.concatenate([p.data.ravel() for p in patches])
    np.testing.assert_array_equal(np.sort(seen), v.data.ravel())


def test_augmented_patches_draw_from_volume_values():
    v = Volume(np.random.default_rng(0).random((16, 16, 16)))
    for p in crop_patches(v, 8, augment=True, seed=1):
        assert np.isin(p.data, v.data).all()


def test_flip_twice_is_identity():
    p = np.random.default_rng(1).random((4, 5, 5))
    aug = ((True, True, True), 0)
    np.testing.assert_array_equal(apply_augmentation(apply_augmentation(p, aug), aug), p)


def test_augmentation_deterministic():
    p = np.random.default_rng(1).random((4, 6, 6))
    a = apply_augmentation(p, draw_augmentation(np.random.default_rng(9)))
    b = apply_augmentation(p, draw_augmentation(np.random.default_rng(9)))
    np.testing.assert_array_equal(a, b)


def test_random_patch_shape():
    v = [Volume(np.zeros((20, 20, 20)))]
    i, origin, block = random_patch(v, 8, np.random.default_rng(0))
    assert i == 0 and block.shape == (8, 8, 8) and all(0 <= o <= 12 for o in origin)


def test_crop_merge_roundtrip_is_lossless():
    v = Volume(np.random.default_rng(2).random((32, 32, 32)))
    merged = merge_patches(crop_patches(v, 16, stride=8), v.shape, overlap=8)
    np.testing.assert_allclose(merged.data, v.data, rtol=0, atol=1e-12)


def test_merge_constant_patches():
    patches = [Patch(p.origin, np.full(p.data.shape, 0.7))
               for p in crop_patches(Volume(np.zeros((24, 20, 28))), 16, stride=6)]
    np.testing.assert_allclose(merge_patches(patches, (24, 20, 28), 8).data, 0.7, atol=1e-12)


def test_merge_single_patch_identity():
    d = np.random.default_rng(0).random((8, 8, 8))
    np.testing.assert_array_equal(merge_patches([Patch((0, 0, 0), d)], d.shape, 4).data, d)


def test_merge_reports_gap():
    with pytest.raises(ShapeError, match=r"\(0, 0, 8\)"):
        merge_patches([Patch((0, 0, 0), np.ones((8, 8, 8)))], (8, 8, 12), 2)


def test_generate_and_load_dataset(tmp_path):
    k = gaussian_psf(1.0, 5, voxel_size=(1e-7,) * 3)
    manifest = generate_dataset(tmp_path, 3, k, NoiseSpec(20.0), seed=4, extents=(16, 16, 16), n_filaments=3)
    assert len(manifest["volumes"]) == 3
    for e in manifest["volumes"]:
        assert abs(e["avg_snr_db"] - 20.0) < 0.1
    paired = Dataset.load(tmp_path, paired=True)
    unpaired = Dataset.load(tmp_path, paired=False)
    assert paired.paired and not unpaired.paired
    assert sorted(v.data.sum() for v in paired.sharp) == pytest.approx(sorted(v.data.sum() for v in unpaired.sharp))
    x = read_volume(tmp_path / "vol_000_sharp.otdv")
    assert x.voxel_size == (1e-7,) * 3


def test_dataset_generation_thread_invariant(tmp_path):
    k = gaussian_psf(1.0, 5)
    a = generate_dataset(tmp_path / "a", 3, k, NoiseSpec(10.0), seed=1, extents=(16, 16, 16), threads=1)
    b = generate_dataset(tmp_path / "b", 3, k, NoiseSpec(10.0), seed=1, extents=(16, 16, 16), threads=3)
    assert [e["blurred_sha256"] for e in a["volumes"]] == [e["blurred_sha256"] for e in b["volumes"]]


def test_dataset_validation():
    with pytest.raises(ConfigError):
        Dataset([], [Volume(np.zeros((2, 2, 2)))])
    with pytest.raises(ConfigError):
        Dataset([Volume(np.zeros((2, 2, 2)))] * 2, [Volume(np.zeros((2, 2, 2)))], paired=True)
