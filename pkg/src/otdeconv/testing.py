"""Finite-difference gradient checking used by the test-suite."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, record_kinks


def relative_error(analytic, numeric, floor: float = 1e-6) -> float:
    """Max elementwise ``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps entries whose true derivative is ~0 from dividing
    round-off by round-off.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float((np.abs(a - n) / denom).max()) if a.size else 0.0


def _same_piece(p: list, q: list) -> bool:
    return len(p) == len(q) and all(np.array_equal(a, b) for a, b in zip(p, q))


# forward one-sided weights on offsets 0, h, 2h, ...; O(h^2) and O(h^4)
_ONE_SIDED = {2: np.array([-3.0, 4.0, -1.0]) / 2.0,
              4: np.array([-25.0, 48.0, -36.0, 16.0, -3.0]) / 12.0}


def _central(values: list, h: float) -> float:
    if len(values) == 2:
        return (values[0] - values[1]) / (2 * h)
    return (8.0 * (values[0] - values[1]) - (values[2] - values[3])) / (12 * h)


def numeric_grad(f: Callable[[], float], t: Tensor, step: float = 1e-6,
                 indices: Sequence[tuple] | None = None, shrink: int = 3, order: int = 2,
                 stats: dict | None = None) -> np.ndarray:
    """Central differences of ``f()`` w.r.t. entries of ``t.data`` (mutated in place, restored).

    ``order=4`` uses the five-point stencil, whose O(h^4) truncation error
    allows a larger step and so less round-off.

    When the stencil points land on different linear pieces of a relu / abs,
    the difference quotient straddles a kink and measures neither one-sided
    slope.  A one-sided stencil that stays on the centre point's own piece is
    tried first (that piece is what backprop differentiates), then the step is
    cut by 10x, up to ``shrink`` times.  ``stats`` (if given) counts probes
    that needed a smaller step or a one-sided stencil, and probes that never
    settled.
    """
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    offsets = (1.0, -1.0) if order == 2 else (1.0, -1.0, 2.0, -2.0)
    flat = t.data.reshape(-1)
    idx = range(flat.size) if indices is None else [np.ravel_multi_index(i, t.shape) for i in indices]
    out = np.zeros(len(idx))

    def evaluate(i, x):
        with record_kinks() as signs:
            flat[i] = x
            value = f()
        return value, signs

    for j, i in enumerate(idx):
        orig = flat[i]
        h = step
        estimate, one_sided, centre = None, False, None
        for _ in range(shrink + 1):
            points = [evaluate(i, orig + c * h) for c in offsets]
            values = [v for v, _ in points]
            if all(_same_piece(points[0][1], q) for _, q in points[1:]):
                estimate = _central(values, h)
                break
            if centre is None:
                centre = evaluate(i, orig)
            for side in (1.0, -1.0):
                run = [centre] + [evaluate(i, orig + side * k * h) for k in range(1, order + 1)]
                if all(_same_piece(centre[1], q) for _, q in run[1:]):
                    estimate = side * float(np.dot(_ONE_SIDED[order], [v for v, _ in run])) / h
                    one_sided = True
                    break
            if estimate is not None:
                break
            h /= 10.0
        settled = estimate is not None
        if not settled:
            h *= 10.0
            estimate = _central(values, h)
        flat[i] = orig
        if stats is not None:
            stats["shrunk"] = stats.get("shrunk", 0) + (h < step)
            stats["one_sided"] = stats.get("one_sided", 0) + one_sided
            stats["straddled"] = stats.get("straddled", 0) + (not settled)
            stats["probes"] = stats.get("probes", 0) + 1
        out[j] = estimate
    return out


def check_gradients(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-6,
                    max_entries: int | None = None, rng: np.random.Generator | None = None,
                    order: int = 2, stats: dict | None = None) -> float:
    """Worst relative error between backprop and central differences over ``params``.

    With ``max_entries`` only that many randomly chosen entries per tensor are probed.
    """
    for p in params:
        p.grad = None
    backward(loss_fn())
    worst = 0.0
    rng = rng or np.random.default_rng(0)

    def value():
        return float(loss_fn().data)

    for p in params:
        analytic = np.zeros(p.shape) if p.grad is None else p.grad
        if max_entries is not None and p.size > max_entries:
            flat = rng.choice(p.size, size=max_entries, replace=False)
            idx = [np.unravel_index(i, p.shape) for i in flat]
            a = np.array([analytic[i] for i in idx])
        else:
            idx = None
            a = analytic.reshape(-1)
        worst = max(worst, relative_error(a, numeric_grad(value, p, step, idx, order=order, stats=stats)))
    return worst
