"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Mapping, Sequence

import numpy as np

from .engine import Tensor


@dataclass
class AdamState:
    """Moment accumulators for an ordered parameter list.

    ``m[i]`` and ``v[i]`` belong to the i-th parameter passed to
    :func:`adam_step`; ``t`` counts completed steps.
    """

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[Tensor], grads: Mapping, state: AdamState) -> AdamState:
    """Apply one Adam update in place and advance ``state.t``.

    Parameters
    ----------
    params : sequence of Tensor
        Parameters, in the same order on every call.
    grads : GradientMap
        Must hold an entry for every parameter.
    state : AdamState
    """
    if state.t < 0:
        raise ValueError(f"Adam step counter must be non-negative, got {state.t}")
    for i, p in enumerate(params):
        if p not in grads:
            raise KeyError(f"no gradient for parameter {i} ({p.name or p.shape})")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ValueError(f"Adam state holds {len(state.m)} slots, got {len(params)} parameters")

    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, m, v in zip(params, state.m, state.v):
        g = np.asarray(grads[p], dtype=p.dtype)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        step = (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= np.asarray(state.lr * step, dtype=p.dtype)
    return state


class Adam:
    """Stateful wrapper binding a parameter list to an :class:`AdamState`."""

    def __init__(self, params: Sequence[Tensor], lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def step(self, grads: Mapping) -> None:
        adam_step(self.params, grads, self.state)
