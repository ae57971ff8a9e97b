"""Adam optimiser state and update step."""
from dataclasses import dataclass, field

import numpy as np

from .. import backend
from ..errors import ShapeError


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict, lr: float = 0.001, beta1: float = 0.9,
                   beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        state = cls(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        for name, p in params.items():
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        return state


def adam_step(state: AdamState, params: dict, grads: dict) -> dict:
    """Apply one Adam update in place; returns the same params mapping.

    A zero gradient leaves its parameter bit-identical: the moments stay
    zero and the update term vanishes.
    """
    state.t += 1
    for name, p in params.items():
        if name not in grads:
            raise ShapeError(f"missing gradient for parameter {name!r}")
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        backend.adam_update(p.reshape(-1), np.ascontiguousarray(g).reshape(-1),
                            state.m[name].reshape(-1), state.v[name].reshape(-1),
                            state.lr, state.beta1, state.beta2, state.eps, state.t)
    return params
