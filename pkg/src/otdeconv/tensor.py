"""Define-by-run reverse-mode autodiff over dense float64 arrays.

Each differentiable op records its parents and a closure mapping the output
gradient to per-parent gradients.  :func:`backward` walks the recorded graph
in reverse topological order and accumulates into ``.grad`` of leaf tensors.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .errors import ContractError, ShapeError

__all__ = [
    "Tensor", "no_grad", "is_grad_enabled", "record_kinks", "backward",
    "add", "sub", "mul", "scale", "neg", "square", "absolute",
    "relu", "leaky_relu", "sigmoid",
    "sum", "mean", "l1_mean", "mse",
    "conv3", "instance_norm", "avg_pool2", "upsample2", "concat", "flip", "crop",
]

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


_KINKS: list | None = None


@contextlib.contextmanager
def record_kinks():
    """Collect the sign pattern seen by every piecewise-linear op inside the block.

    Two evaluations with equal patterns lie on the same linear piece of
    relu / leaky_relu / absolute, which is what finite-difference checks need.
    """
    global _KINKS
    prev, _KINKS = _KINKS, []
    try:
        yield _KINKS
    finally:
        _KINKS = prev


def _note_signs(values: np.ndarray) -> None:
    if _KINKS is not None:
        _KINKS.append(values > 0)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __neg__ = lambda self: neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return scale(self, 1.0 / other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], fn: Callable) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = fn
    return out


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor requiring grad")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_toposort(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def absolute(a: Tensor) -> Tensor:
    _note_signs(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (np.sign(a.data) * g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    _note_signs(a.data)
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    factor = np.where(a.data > 0, 1.0, slope)
    _note_signs(a.data)
    return _make(a.data * factor, (a,), lambda g: (g * factor,))


def sigmoid(a: Tensor) -> Tensor:
    # split by sign so exp never overflows
    x = a.data
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),))


# ---------------------------------------------------------------- reductions

def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.full(a.shape, float(g)),))


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return _make(np.asarray(a.data.mean()), (a,), lambda g: (np.full(a.shape, float(g) / n),))


def l1_mean(a: Tensor, b=None) -> Tensor:
    """``mean(|a - b|)`` (``b`` optional)."""
    if b is None:
        d = a.data
        n = d.size
        _note_signs(d)
        return _make(np.asarray(np.abs(d).mean()), (a,), lambda g: (np.sign(d) * (float(g) / n),))
    b = _as_tensor(b)
    d = a.data - b.data
    n = d.size
    _note_signs(d)

    def fn(g):
        s = np.sign(d) * (float(g) / n)
        return _unbroadcast(s, a.shape), _unbroadcast(-s, b.shape)

    return _make(np.asarray(np.abs(d).mean()), (a, b), fn)


def mse(a: Tensor, b=None) -> Tensor:
    """``mean((a - b)**2)`` (``b`` optional)."""
    b = _as_tensor(0.0 if b is None else b)
    d = a.data - b.data
    n = d.size

    def fn(g):
        s = d * (2.0 * float(g) / n)
        return _unbroadcast(s, a.shape), _unbroadcast(-s, b.shape)

    return _make(np.asarray((d * d).mean()), (a, b), fn)


# ---------------------------------------------------------------- volumetric

def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * 3
    t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise ShapeError(f"expected 3 values, got {v!r}")
    return t


def _zero_pad(a: np.ndarray, widths) -> np.ndarray:
    # np.pad costs more than the convolution itself on the small tensors used here
    shape = tuple(n + lo + hi for n, (lo, hi) in zip(a.shape, widths))
    out = np.zeros(shape)
    out[tuple(slice(lo, lo + n) for n, (lo, _) in zip(a.shape, widths))] = a
    return out


def conv3(x: Tensor, w: Tensor, bias: Tensor | None = None, padding="same", stride: int = 1) -> Tensor:
    """3-D cross-correlation ``out[n,o] = sum_c w[o,c] (*) x[n,c]`` with zero padding.

    ``padding`` is ``"same"`` (odd kernels, stride 1 keeps extents), ``"valid"``
    or explicit per-axis amounts.
    """
    if x.ndim != 5 or w.ndim != 5:
        raise ShapeError(f"conv3 expects 5-D input and kernel, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"input has {x.shape[1]} channels, kernel expects {w.shape[1]}")
    ks = w.shape[2:]
    if padding == "same":
        if any(k % 2 == 0 for k in ks):
            raise ShapeError(f"'same' padding needs odd kernel extents, got {ks}")
        pad = tuple(k // 2 for k in ks)
    elif padding == "valid":
        pad = (0, 0, 0)
    else:
        pad = _triple(padding)
    if any(p > k - 1 for p, k in zip(pad, ks)):
        raise ShapeError("padding may not exceed kernel extent - 1")
    s = int(stride)
    if any(n + 2 * p < k for n, p, k in zip(x.shape[2:], pad, ks)):
        raise ShapeError(f"kernel {ks} larger than padded input {x.shape[2:]}")
    xp = _zero_pad(x.data, ((0, 0), (0, 0)) + tuple((p, p) for p in pad))
    out = kernels.correlate_padded(xp, w.data, s)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1, 1)
    in_shape = x.shape

    def fn(g):
        gw = kernels.correlate_weight_grad(xp, g, ks, s) if w.requires_grad else None
        gx = _conv3_input_grad(g, w.data, in_shape, pad, s) if x.requires_grad else None
        gb = g.sum(axis=(0, 2, 3, 4)) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, w) if bias is None else (x, w, bias)
    return _make(out, parents, fn)


def _conv3_input_grad(g, w, in_shape, pad, s):
    ks = w.shape[2:]
    if s > 1:
        dil = np.zeros(g.shape[:2] + tuple((n - 1) * s + 1 for n in g.shape[2:]))
        dil[:, :, ::s, ::s, ::s] = g
        g = dil
    widths = [(0, 0), (0, 0)]
    for n_in, n_g, k, p in zip(in_shape[2:], g.shape[2:], ks, pad):
        left = k - 1 - p
        right = n_in + k - 1 - n_g - left
        widths.append((left, right))
    gp = _zero_pad(g, widths)
    wt = np.ascontiguousarray(w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
    return kernels.correlate_padded(gp, wt, 1)


def instance_norm(x: Tensor, weight: Tensor | None = None, bias: Tensor | None = None,
                  eps: float = 1e-5) -> Tensor:
    """Normalize each (sample, channel) slice to zero mean, unit variance; optional affine."""
    if x.ndim < 3:
        raise ShapeError("instance_norm expects (N, C, ...) input")
    axes = tuple(range(2, x.ndim))
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    cshape = (1, -1) + (1,) * len(axes)
    out = xhat
    if weight is not None:
        out = out * weight.data.reshape(cshape)
    if bias is not None:
        out = out + bias.data.reshape(cshape)

    def fn(g):
        gw = (g * xhat).sum(axis=(0,) + axes) if weight is not None and weight.requires_grad else None
        gb = g.sum(axis=(0,) + axes) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * weight.data.reshape(cshape) if weight is not None else g
            gx = inv * (gh - gh.mean(axis=axes, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=axes, keepdims=True))
        return gx, gw, gb

    parents = [x]
    if weight is not None:
        parents.append(weight)
    if bias is not None:
        parents.append(bias)

    def dispatch(g):
        gx, gw, gb = fn(g)
        res = [gx]
        if weight is not None:
            res.append(gw)
        if bias is not None:
            res.append(gb)
        return res

    return _make(out, parents, dispatch)


def avg_pool2(x: Tensor) -> Tensor:
    """2x2x2 average pooling with stride 2 over the last three axes."""
    n, c, d, h, w = x.shape
    if d % 2 or h % 2 or w % 2:
        raise ShapeError(f"avg_pool2 needs even extents, got {x.shape[2:]}")
    out = x.data.reshape(n, c, d // 2, 2, h // 2, 2, w // 2, 2).mean(axis=(3, 5, 7))

    def fn(g):
        g8 = np.broadcast_to((g / 8.0)[:, :, :, None, :, None, :, None],
                             (n, c, d // 2, 2, h // 2, 2, w // 2, 2))
        return (g8.reshape(x.shape),)

    return _make(out, (x,), fn)


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour upsampling by 2 along the last three axes."""
    n, c, d, h, w = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None, :, None],
                          (n, c, d, 2, h, 2, w, 2)).reshape(n, c, 2 * d, 2 * h, 2 * w)

    def fn(g):
        return (g.reshape(n, c, d, 2, h, 2, w, 2).sum(axis=(3, 5, 7)),)

    return _make(np.ascontiguousarray(out), (x,), fn)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + sizes)

    def fn(g):
        return [np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))]

    return _make(out, tensors, fn)


def flip(x: Tensor, axes=(-3, -2, -1)) -> Tensor:
    return _make(np.ascontiguousarray(np.flip(x.data, axis=axes)), (x,),
                 lambda g: (np.ascontiguousarray(np.flip(g, axis=axes)),))


def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def crop(x: Tensor, margin: int) -> Tensor:
    """Drop ``margin`` voxels from each side of the last three axes."""
    if margin == 0:
        return x
    m = int(margin)
    sl = (slice(None), slice(None)) + (slice(m, -m),) * 3
    if any(n <= 2 * m for n in x.shape[2:]):
        raise ShapeError(f"cannot crop {m} from extents {x.shape[2:]}")

    def fn(g):
        full = np.zeros(x.shape)
        full[sl] = g
        return (full,)

    return _make(np.ascontiguousarray(x.data[sl]), (x,), fn)
