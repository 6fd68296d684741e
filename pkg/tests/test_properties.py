import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from otdeconv import tensor as T
from otdeconv.metrics import psnr, ssim
from otdeconv.models import BlurKernel
from otdeconv.optics import kernel_correlation, smooth_kernel
from otdeconv.simulate import apply_augmentation, blur, crop_patches, merge_patches
from otdeconv.tensor import Tensor
from otdeconv.training import ReplayBuffer, cycle_loss, lsgan_d_from_scores, transport_cost
from otdeconv.volume import Volume, encode_checkpoint, encode_volume, read_checkpoint, read_volume

SETTINGS = settings(max_examples=40, deadline=None)
seeds = st.integers(0, 2 ** 32 - 1)
extents = st.tuples(*(st.integers(4, 14),) * 3)


@SETTINGS
@given(extents, st.integers(2, 8), st.integers(0, 4), seeds)
def test_crop_merge_identity_is_lossless(shape, patch, overlap, seed):
    v = Volume(np.random.default_rng(seed).random(shape))
    p = tuple(min(patch, n) for n in shape)
    stride = tuple(max(1, q - overlap) for q in p)
    out = merge_patches(crop_patches(v, p, stride), shape, overlap=overlap)
    np.testing.assert_allclose(out.data, v.data, rtol=0, atol=1e-12)


@SETTINGS
@given(st.integers(1, 3), st.integers(1, 3), st.sampled_from([1, 3, 5]), st.sampled_from([1, 2]), seeds)
def test_conv3_adjoint_identity(cin, cout, k, stride, seed):
    # <conv(x), g> = <x, conv^T g>, with the transpose taken from the autodiff backward pass
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((1, cin, 6, 5, 4)), requires_grad=True)
    w = Tensor(rng.standard_normal((cout, cin, k, k, k)))
    y = T.conv3(x, w, stride=stride)
    g = rng.standard_normal(y.shape)
    T.backward(T.sum(T.mul(y, g)))
    assert abs((y.data * g).sum() - (x.data * x.grad).sum()) < 1e-9 * max(1.0, np.abs(y.data * g).sum())


@SETTINGS
@given(data=hnp.arrays(np.float32, st.tuples(*(st.integers(1, 5),) * 3),
                       elements=st.floats(-1e6, 1e6, width=32)),
       voxel=st.tuples(*(st.floats(1e-9, 1e-5),) * 3))
def test_volume_encoding_roundtrip_bit_exact(data, voxel, tmp_path_factory):
    path = tmp_path_factory.mktemp("v") / "v.otdv"
    v = Volume(data.astype(np.float64), voxel)
    path.write_bytes(encode_volume(v))
    back = read_volume(path)
    assert back.data.astype(np.float32).tobytes() == data.tobytes()
    assert back.voxel_size == v.voxel_size
    assert encode_volume(back) == encode_volume(v)


@SETTINGS
@given(tensors=st.dictionaries(st.text("abcdefg.", min_size=1, max_size=6),
                               hnp.arrays(np.float32, st.tuples(st.integers(0, 4), st.integers(1, 3)),
                                          elements=st.floats(-10, 10, width=32)), max_size=4))
def test_checkpoint_roundtrip_bit_exact(tensors, tmp_path_factory):
    path = tmp_path_factory.mktemp("c") / "c.otdv"
    path.write_bytes(encode_checkpoint(tensors, {"step": 3}))
    back, meta = read_checkpoint(path)
    assert list(back) == list(tensors) and meta == {"step": 3}
    for k, v in tensors.items():
        assert back[k].astype(np.float32).tobytes() == v.tobytes()


@SETTINGS
@given(seeds)
def test_psnr_and_ssim_symmetric_and_bounded(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((2, 10, 10, 10))
    assert psnr(a, b) == psnr(b, a)
    s = ssim(a, b)
    assert abs(s - ssim(b, a)) < 1e-12 and -1.0 <= s <= 1.0


@SETTINGS
@given(seeds, st.floats(0.3, 2.0))
def test_smoothing_preserves_mass(seed, sigma):
    k = np.random.default_rng(seed).random((7, 7, 7))
    assert abs(smooth_kernel(Volume(k), sigma).data.sum() - k.sum()) < 1e-10


@SETTINGS
@given(seeds, st.floats(0.1, 10.0), st.floats(-5.0, 5.0))
def test_correlation_invariant_to_affine_rescaling(seed, scale, shift):
    rng = np.random.default_rng(seed)
    a, b = rng.random((2, 5, 5, 5))
    assert abs(kernel_correlation(a, b) - kernel_correlation(scale * a + shift, b)) < 1e-10


@SETTINGS
@given(seeds)
def test_blur_is_linear_and_mass_preserving_inside(seed):
    rng = np.random.default_rng(seed)
    k = rng.random((3, 3, 3))
    k /= k.sum()
    x1, x2 = np.zeros((2, 12, 12, 12))
    x1[4:8, 4:8, 4:8] = rng.random((4, 4, 4))
    x2[3:9, 5:7, 4:8] = rng.random((6, 2, 4))
    b = lambda v: blur(Volume(v), Volume(k)).data  # noqa: E731
    np.testing.assert_allclose(b(2 * x1 - x2), 2 * b(x1) - b(x2), atol=1e-12)
    assert abs(b(x1).sum() - x1.sum()) < 1e-12


@SETTINGS
@given(seeds, st.booleans(), st.booleans())
def test_kernel_projection(seed, nonneg, unit_sum):
    B = BlurKernel((3, 3, 3), init=np.random.default_rng(seed).standard_normal((3, 3, 3)) + 0.2)
    B.project(nonneg=nonneg, unit_sum=unit_sum)
    if nonneg:
        assert (B.h.data >= 0).all()
    if unit_sum and B.h.data.sum() != 0:
        assert abs(B.h.data.sum() - 1.0) < 1e-12


@SETTINGS
@given(st.integers(0, 6), seeds, st.integers(1, 40))
def test_replay_buffer_bounded_and_replays_history(capacity, seed, n):
    buf = ReplayBuffer(capacity, np.random.default_rng(seed))
    for i in range(n):
        out = buf.query(np.full((1, 1), float(i)))
        assert len(buf) <= capacity
        assert 0 <= out[0, 0] <= i


@SETTINGS
@given(seeds)
def test_losses_nonnegative(seed):
    rng = np.random.default_rng(seed)
    x, y = Tensor(rng.random((1, 1, 4, 4, 4))), Tensor(rng.random((1, 1, 4, 4, 4)))
    G = lambda t: T.scale(t, 0.7)  # noqa: E731
    h = lambda t: T.add(t, 0.05)  # noqa: E731
    assert float(cycle_loss(G, h, x, y).data) >= 0
    assert transport_cost(G, h, x, y) >= 0
    scores = [Tensor(rng.standard_normal((1, 1, 2, 2, 2)))]
    assert float(lsgan_d_from_scores(scores, scores).data) >= 0


@SETTINGS
@given(seeds, st.tuples(st.booleans(), st.booleans(), st.booleans()), st.integers(0, 3))
def test_augmentation_commutes_with_pairing(seed, flips, k):
    # the same augmentation applied to both members of a pair keeps them voxel-aligned
    rng = np.random.default_rng(seed)
    x = rng.random((4, 6, 6))
    y = 2.0 * x + 1.0
    ax, ay = apply_augmentation(x, (flips, k)), apply_augmentation(y, (flips, k))
    np.testing.assert_array_equal(ay, 2.0 * ax + 1.0)
    assert sorted(ax.ravel()) == sorted(x.ravel())
