import math

import numpy as np
import pytest

from otdeconv.errors import ConfigError, ShapeError
from otdeconv.metrics import MetricReport, measure_avg_snr, psnr, ssim, ssim_map


def naive_ssim(a, b, w, L=1.0):
    c1, c2 = (0.01 * L) ** 2, (0.03 * L) ** 2
    vals = []
    for z in range(a.shape[0] - w + 1):
        for y in range(a.shape[1] - w + 1):
            for x in range(a.shape[2] - w + 1):
                pa = a[z:z + w, y:y + w, x:x + w]
                pb = b[z:z + w, y:y + w, x:x + w]
                ma, mb = pa.mean(), pb.mean()
                va, vb = pa.var(), pb.var()
                cov = ((pa - ma) * (pb - mb)).mean()
                vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def test_psnr_closed_form():
    x = np.zeros((4, 4, 4))
    assert psnr(x, x + 0.1) == pytest.approx(20.0, abs=1e-12)


def test_psnr_identity_is_infinite():
    x = np.random.default_rng(0).random((4, 4, 4))
    assert psnr(x, x) == math.inf


def test_psnr_max_value():
    x = np.zeros((3, 3, 3))
    assert psnr(x, x + 0.1, max_value=10.0) == pytest.approx(40.0, abs=1e-12)


def test_ssim_constant_pair():
    # means 0.5 and 0.25, no variance: (2ab + C1) / (a^2 + b^2 + C1)
    expected = (0.25 + 1e-4) / (0.3125 + 1e-4)
    assert expected == pytest.approx(0.80006, abs=1e-5)
    got = ssim(np.full((10, 10, 10), 0.5), np.full((10, 10, 10), 0.25))
    assert abs(got - expected) < 1e-6


def test_ssim_identity_is_one():
    x = np.random.default_rng(1).random((12, 12, 12))
    assert ssim(x, x) == 1.0


def test_ssim_matches_loop_oracle():
    rng = np.random.default_rng(2)
    a = rng.random((10, 9, 11))
    b = np.clip(a + 0.1 * rng.standard_normal(a.shape), 0, 1)
    assert ssim(a, b, window=4) == pytest.approx(naive_ssim(a, b, 4), abs=1e-12)


def test_ssim_map_shape_and_symmetry():
    rng = np.random.default_rng(3)
    a, b = rng.random((2, 12, 12, 12))
    m = ssim_map(a, b, window=8)
    assert m.shape == (5, 5, 5)
    np.testing.assert_allclose(m, ssim_map(b, a, window=8), atol=1e-14)


def test_metric_errors():
    with pytest.raises(ShapeError):
        psnr(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))
    with pytest.raises(ConfigError):
        ssim(np.zeros((4, 4, 4)), np.zeros((4, 4, 4)), window=8)


def test_avg_snr_identity_and_closed_form():
    g = np.random.default_rng(4).random((5, 5, 5))
    assert measure_avg_snr(g, g) == math.inf
    assert measure_avg_snr(g, g * 1.1) == pytest.approx(20.0, abs=1e-12)


def test_report_identity():
    x = np.random.default_rng(5).random((10, 10, 10))
    r = MetricReport.compute(x, x, per_slice=True)
    assert r.psnr_db == math.inf and r.ssim == 1.0 and len(r.per_slice_psnr) == 10
