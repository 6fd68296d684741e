"""Pure-numpy 3-D cross-correlation kernels (fallback backend).

Inputs are pre-padded: ``xp`` has shape ``(N, C, Dp, Hp, Wp)``.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BACKEND = "numpy"

# im2col becomes memory-heavy for big kernels; shift-and-accumulate wins there
_IM2COL_MAX_TAPS = 27


def _out_extent(n, k, s):
    return (n - k) // s + 1


def correlate_padded(xp: np.ndarray, w: np.ndarray, stride: int = 1) -> np.ndarray:
    n, c, dp, hp, wp = xp.shape
    o, c2, kd, kh, kw = w.shape
    s = stride
    do, ho, wo = _out_extent(dp, kd, s), _out_extent(hp, kh, s), _out_extent(wp, kw, s)
    if kd * kh * kw <= _IM2COL_MAX_TAPS:
        cols = sliding_window_view(xp, (kd, kh, kw), axis=(2, 3, 4))[:, :, ::s, ::s, ::s]
        out = np.tensordot(cols, w, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
        return np.ascontiguousarray(np.moveaxis(out, 4, 1))
    out = np.zeros((n, o, do * ho * wo))
    for i in range(kd):
        for j in range(kh):
            for k in range(kw):
                xs = xp[:, :, i:i + s * (do - 1) + 1:s, j:j + s * (ho - 1) + 1:s, k:k + s * (wo - 1) + 1:s]
                out += np.matmul(w[:, :, i, j, k], xs.reshape(n, c, -1))
    return out.reshape(n, o, do, ho, wo)


def correlate_weight_grad(xp: np.ndarray, gout: np.ndarray, ksize, stride: int = 1) -> np.ndarray:
    """Gradient of ``correlate_padded`` w.r.t. the kernel."""
    n, c = xp.shape[:2]
    o, do, ho, wo = gout.shape[1:]
    kd, kh, kw = ksize
    s = stride
    if kd * kh * kw <= _IM2COL_MAX_TAPS:
        cols = sliding_window_view(xp, (kd, kh, kw), axis=(2, 3, 4))[:, :, ::s, ::s, ::s]
        return np.tensordot(gout, cols, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
    gw = np.empty((o, c, kd, kh, kw))
    g2 = gout.reshape(n, o, -1)
    for i in range(kd):
        for j in range(kh):
            for k in range(kw):
                xs = xp[:, :, i:i + s * (do - 1) + 1:s, j:j + s * (ho - 1) + 1:s, k:k + s * (wo - 1) + 1:s]
                gw[:, :, i, j, k] = np.einsum("nov,ncv->oc", g2, xs.reshape(n, c, -1))
    return gw
