"""Central finite differences against the backward pass."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from forge.ad.tensor import Tensor


def grad_check(f: Callable[[], Tensor], inputs: Sequence[Tensor] | Tensor, eps: float = 1e-4,
               max_coords: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Max relative error between analytic and numeric gradients.

    ``f`` rebuilds the graph from ``inputs`` on every call and returns a scalar.
    Inputs should be float64. With ``max_coords`` only that many randomly
    chosen coordinates per input are perturbed.

    Returns:
        max over checked coordinates of |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|).
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    for x in inputs:
        x.requires_grad = True
        x.grad = None
    out = f()
    out.backward()
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for x in inputs:
        analytic = np.zeros_like(x.data) if x.grad is None else x.grad
        flat = x.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            plus = float(f().data)
            flat[i] = orig - eps
            minus = float(f().data)
            flat[i] = orig
            numeric = (plus - minus) / (2 * eps)
            a = float(analytic.reshape(-1)[i])
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, err)
    return worst
