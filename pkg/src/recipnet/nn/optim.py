"""Adam with bias correction, written functionally: old arrays are never touched."""
from dataclasses import dataclass, field

import numpy as np

from .tensor import DTYPE


@dataclass
class OptimState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, tensors, **kw):
        zeros = lambda: {k: np.zeros_like(a) for k, a in tensors.items()}
        return cls(m=zeros(), v=zeros(), **kw)


def adam_step(tensors, grads, state: OptimState):
    """Return ``(new_tensors, new_state)``."""
    if set(grads) != set(tensors):
        raise KeyError("gradient names do not match parameter names")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_t, new_m, new_v = {}, {}, {}
    for k, p in tensors.items():
        g = grads[k]
        if g.shape != p.shape or state.m[k].shape != p.shape:
            raise ValueError(f"shape mismatch for {k}")
        m = (b1 * state.m[k] + (1.0 - b1) * g).astype(DTYPE)
        v = (b2 * state.v[k] + (1.0 - b2) * g * g).astype(DTYPE)
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_t[k] = (p - update).astype(DTYPE)
        new_m[k], new_v[k] = m, v
    return new_t, OptimState(state.lr, b1, b2, state.eps, t, new_m, new_v)
