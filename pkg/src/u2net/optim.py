"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigurationError
from .tensor import Tensor


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def reset(self) -> None:
        self.t = 0
        self.m, self.v = [], []


def adam_step(params: Sequence[Tensor], state: AdamState, grads: Sequence[np.ndarray] | None = None) -> AdamState:
    """One Adam update in place.  ``grads`` defaults to each parameter's ``.grad``.

    Parameters without a gradient are treated as having a zero gradient, so
    their moments still decay and ``t`` advances for all of them together.
    """
    if grads is None:
        grads = [p.grad for p in params]
    if len(grads) != len(params):
        raise ConfigurationError(f"{len(params)} params but {len(grads)} grads")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    elif len(state.m) != len(params):
        raise ConfigurationError("AdamState was initialised for a different parameter list")

    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.shape:
            raise ConfigurationError(f"grad shape {g.shape} != param shape {p.shape}")
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        p.data -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype, copy=False)
    return state
