import numpy as np
import pytest

from otdeconv.baselines import (PlsConfig, _adjoint, _forward, _grad3, _grad3_adjoint, lipschitz_bound,
                                pls_gradient, pls_objective, richardson_lucy, tv_pls, tv_value)
from otdeconv.errors import ConfigError
from otdeconv.metrics import psnr
from otdeconv.optics import gaussian_psf
from otdeconv.simulate import blur, make_phantom
from otdeconv.volume import Volume

K = gaussian_psf((1.5, 1.0, 1.0), (7, 5, 5)).data


def delta(n=3):
    d = np.zeros((n, n, n))
    d[n // 2, n // 2, n // 2] = 1.0
    return d


def test_rl_delta_kernel_fixed_point():
    y = Volume(np.random.default_rng(0).random((8, 8, 8)) + 0.1)
    out = richardson_lucy(y, delta(), iterations=1)
    np.testing.assert_allclose(out.data, y.data, rtol=1e-12)
    out = richardson_lucy(y, delta(), iterations=20)
    np.testing.assert_allclose(out.data, y.data, rtol=1e-12)


def test_rl_nonnegative_and_gains_on_noiseless_phantom():
    x = make_phantom((24, 24, 24), 5, seed=3)
    y = blur(x, Volume(K))
    out = richardson_lucy(y, K, iterations=50)
    assert (out.data >= 0).all()
    assert psnr(x.data, out.data) - psnr(x.data, y.data) >= 2.0


def test_rl_conserves_intensity_for_interior_content():
    x = np.zeros((20, 20, 20))
    x[8:12, 8:12, 8:12] = 1.0
    y = blur(Volume(x), Volume(K))
    sums = []
    richardson_lucy(y, K, iterations=50, callback=lambda i, v: sums.append(v.sum()))
    assert len(sums) == 50
    assert max(abs(s - y.data.sum()) for s in sums) < 1e-6


def test_rl_rejects_bad_inputs():
    y = Volume(np.ones((4, 4, 4)))
    with pytest.raises(ConfigError):
        richardson_lucy(Volume(-np.ones((4, 4, 4))), delta())
    with pytest.raises(ConfigError):
        richardson_lucy(y, 2 * delta())
    with pytest.raises(ConfigError):
        richardson_lucy(y, delta(), iterations=0)


def test_forward_adjoint_pair():
    rng = np.random.default_rng(1)
    k = rng.random((3, 5, 3))
    x, r = rng.standard_normal((2, 9, 8, 7))
    assert abs((_forward(x, k) * r).sum() - (x * _adjoint(r, k)).sum()) < 1e-10


def test_grad3_adjoint_pair():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((5, 6, 7))
    p = [rng.standard_normal(x.shape) for _ in range(3)]
    lhs = sum((g * q).sum() for g, q in zip(_grad3(x), p))
    assert abs(lhs - (x * _grad3_adjoint(p)).sum()) < 1e-12


def test_tv_of_constant_is_eps_times_voxels():
    assert tv_value(np.full((4, 4, 4), 2.0), eps=1e-3) == pytest.approx(64e-3, rel=1e-12)


def test_pls_gradient_finite_differences():
    rng = np.random.default_rng(3)
    x = rng.random((6, 6, 6))
    y = rng.random((6, 6, 6))
    cfg = PlsConfig(lam=0.05, eps_tv=0.1)
    g = pls_gradient(x, y, K, cfg)
    worst = 0.0
    for idx in [(0, 0, 0), (2, 3, 1), (5, 5, 5), (3, 0, 4), (1, 4, 2)]:
        e = np.zeros_like(x)
        e[idx] = 1e-6
        fd = (pls_objective(x + e, y, K, cfg) - pls_objective(x - e, y, K, cfg)) / 2e-6
        worst = max(worst, abs(fd - g[idx]) / max(1.0, abs(g[idx])))
    assert worst < 1e-6


def test_lipschitz_bound_against_dense_eigenvalue():
    shape = (8, 8, 8)
    n = int(np.prod(shape))
    H = np.empty((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = 1.0
        H[:, j] = _forward(e.reshape(shape), K).ravel()
    top = np.linalg.eigvalsh(H.T @ H)[-1]
    bound = lipschitz_bound(K, shape, PlsConfig(regularizer="none"), iterations=200)
    assert 2 * top <= bound <= 2 * top * 1.0101
    tv = lipschitz_bound(K, shape, PlsConfig(lam=1e-3, eps_tv=1e-2), iterations=200)
    assert tv == pytest.approx(bound + 1e-3 * 12 / 1e-2, rel=1e-12)


def test_tv_pls_monotone_and_improves_objective():
    x = make_phantom((16, 16, 16), 3, seed=4)
    y = blur(x, Volume(K))
    cfg = PlsConfig(lam=1e-3, eps_tv=1e-2, iterations=40)
    hist = []
    out = tv_pls(y, K, cfg, history=hist)
    assert len(hist) == 41
    assert all(b <= a + 1e-15 for a, b in zip(hist, hist[1:]))
    assert hist[-1] < hist[0]
    assert (out.data >= 0).all()


def test_tv_pls_default_eps_monotone():
    x = make_phantom((16, 16, 16), 2, seed=5)
    hist = []
    tv_pls(blur(x, Volume(K)), K, PlsConfig(iterations=10), history=hist)
    assert all(b <= a for a, b in zip(hist, hist[1:]))


def test_tv_pls_without_regularizer_approaches_data():
    x = make_phantom((16, 16, 16), 2, seed=6)
    y = blur(x, Volume(K))
    cfg = PlsConfig(regularizer="none", iterations=200, nonneg_projection=False, init="zeros")
    out = tv_pls(y, K, cfg)
    assert pls_objective(out.data, y.data, K, cfg) < 1e-2 * (y.data ** 2).sum()


def test_pls_config_validation():
    for kw in (dict(regularizer="l1"), dict(step_size=0.0), dict(iterations=0), dict(lam=-1.0), dict(init="x")):
        with pytest.raises(ConfigError):
            PlsConfig(**kw)
