"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import NumericalError, ShapeError
from .tensor import Tensor


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState,
              names: Sequence[str] | None = None) -> list[np.ndarray]:
    """Return updated copies of ``params``; ``state`` is advanced in place.

    Moment buffers are created (zeroed) on first use.  A non-finite gradient
    aborts before anything is modified.
    """
    if len(params) != len(grads):
        raise ShapeError("params and grads differ in length")
    for i, (p, g) in enumerate(zip(params, grads)):
        if np.shape(p) != np.shape(g):
            raise ShapeError(f"gradient {i} has shape {np.shape(g)}, parameter {np.shape(p)}")
        if not np.all(np.isfinite(g)):
            label = names[i] if names else f"#{i}"
            raise NumericalError(f"non-finite gradient for parameter {label}; step aborted")
    if not state.m:
        state.m = [np.zeros(np.shape(p)) for p in params]
        state.v = [np.zeros(np.shape(p)) for p in params]
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        m = b1 * state.m[i] + (1.0 - b1) * g
        v = b2 * state.v[i] + (1.0 - b2) * g * g
        state.m[i], state.v[i] = m, v
        out.append(p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
    return out


class Adam:
    """Optimizer over a fixed list of tensors; missing grads count as zero."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4, betas=(0.5, 0.999),
                 eps: float = 1e-8, names: Sequence[str] | None = None):
        self.params = list(params)
        self.names = list(names) if names is not None else None
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        grads = [np.zeros(p.shape) if p.grad is None else p.grad for p in self.params]
        new = adam_step([p.data for p in self.params], grads, self.state, self.names)
        for p, d in zip(self.params, new):
            p.data = d
