"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from forge.ad.tensor import Tensor
from forge.errors import ShapeMismatch


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-7) -> AdamState:
    """Update every array in ``params`` in place. Missing grads count as zero.

    ``params`` maps names to numpy arrays (or Tensors, whose ``.data`` is used).
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        arr = p.data if isinstance(p, Tensor) else p
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(arr)
        elif g.shape != arr.shape:
            raise ShapeMismatch(f"grad for {name}: {g.shape} != {arr.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(arr)
            state.v[name] = np.zeros_like(arr)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        arr -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(arr.dtype)
    return state


class Adam:
    """Thin stateful wrapper around :func:`adam_step` for Tensor parameters."""

    def __init__(self, params: dict, beta1=0.9, beta2=0.999, eps=1e-7):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state = AdamState()

    def step(self, lr: float) -> None:
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        adam_step(self.params, grads, self.state, lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
