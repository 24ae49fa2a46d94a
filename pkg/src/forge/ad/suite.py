"""Finite-difference checks for every differentiable op and for a tiny model."""

from __future__ import annotations

import numpy as np

from forge.ad import tensor as ad
from forge.ad.gradcheck import grad_check
from forge.ad.tensor import Tensor, precision


def _r(rng, *shape, scale=1.0):
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


def _sq(t: Tensor) -> Tensor:
    # sum of squares keeps every output coordinate in the objective
    return ad.sum_(ad.mul(t, t))


def _wsum(t: Tensor, w: np.ndarray) -> Tensor:
    return ad.sum_(ad.mul(t, Tensor(w)))


def op_checks(seed: int, eps: float = 1e-4) -> dict[str, float]:
    """Max relative error per op on random float64 inputs."""
    out = {}
    with precision(64):
        rng = np.random.default_rng(seed)
        x = _r(rng, 2, 5, 4)
        w = _r(rng, 4, 3)
        v = _r(rng, 4)
        kern = _r(rng, 3, 4, 2)
        scale, offset = _r(rng, 4), _r(rng, 4)
        wt = rng.normal(size=(2, 5, 4))
        labels = rng.integers(0, 3, size=5)

        cases = {
            "matmul": (lambda: _sq(ad.matmul(x, w)), [x, w]),
            "batched_matmul": (lambda: _wsum(ad.matmul(x, ad.transpose(x)),
                                             rng_fixed(seed, (2, 5, 5))), [x]),
            "add": (lambda: _sq(ad.add(x, v)), [x, v]),
            "mul": (lambda: _wsum(ad.mul(x, v), wt), [x, v]),
            "concat": (lambda: _wsum(ad.concat([x, x[..., :1]], -1),
                                     rng_fixed(seed, (2, 5, 5))), [x]),
            "reshape": (lambda: _wsum(ad.reshape(x, (10, 4)), wt.reshape(10, 4)), [x]),
            "transpose": (lambda: _wsum(ad.transpose(x), wt.swapaxes(-1, -2)), [x]),
            "slice": (lambda: _sq(x[:, 1:4, ::2]), [x]),
            "swish": (lambda: _wsum(ad.swish(x), wt), [x]),
            "relu": (lambda: _wsum(ad.relu(x), wt), [x]),
            "squared_relu": (lambda: _wsum(ad.squared_relu(x), wt), [x]),
            "softmax": (lambda: _wsum(ad.softmax(x), wt), [x]),
            "log_softmax": (lambda: _wsum(ad.log_softmax(x), wt), [x]),
            "layer_norm": (lambda: _wsum(ad.layer_norm(x, scale, offset), wt),
                           [x, scale, offset]),
            "conv1d": (lambda: _sq(ad.conv1d(x, kern, stride=2)), [x, kern]),
            "cross_entropy": (lambda: ad.cross_entropy(ad.reshape(x[0], (5, 4))[:, :3], labels),
                              [x]),
            "mean": (lambda: _sq(ad.mean(x, axis=1)), [x]),
            "sum": (lambda: _sq(ad.sum_(x, axis=-1, keepdims=True)), [x]),
            "neg_scale": (lambda: _wsum(ad.scale(ad.neg(x), 0.3), wt), [x]),
            "sigmoid": (lambda: _wsum(ad.sigmoid(x), wt), [x]),
            # the same seeded mask on every call, so the function is deterministic
            "dropout": (lambda: _wsum(ad.dropout(x, 0.3, True, np.random.default_rng(seed)), wt),
                        [x]),
        }
        for name, (f, inputs) in cases.items():
            out[name] = grad_check(f, inputs, eps)
    return out


def rng_fixed(seed: int, shape) -> np.ndarray:
    return np.random.default_rng([seed, 99]).normal(size=shape)


def tiny_model_setup(seed: int):
    """A small relational model with well-conditioned random parameters.

    Patch length 4, 8 patches, width 8, attention width 4, three heads
    (``k`` depends on ``km`` and ``r``), both combiner convolutions on.
    Query/key offsets sit near 1 so attention scores stay clear of the kink
    of the squared ReLU, where central differences are not accurate.
    """
    from forge import gpam
    cfg = gpam.ModelConfig(
        trace_length=32, patch_size=4, model_dim=8, attn_dim=4, merge_filter_1=4,
        merge_filter_2=2, head_units=[16, 8], dropout_p=0.0,
        heads=[gpam.HeadSpec("km", "km"), gpam.HeadSpec("r", "r"),
               gpam.HeadSpec("k", "k", depends_on=["km", "r"])])
    params = gpam.init_params(cfg, seed)
    rng = np.random.default_rng(seed)
    for name, t in params.items():
        if "gamma" in name:
            t.data = rng.normal(0.0, 0.5, size=t.shape)
        elif ".beta" in name:
            t.data = 1.0 + rng.normal(0.0, 0.1, size=t.shape)
        elif "pos" in name or name.endswith(".b"):
            t.data = rng.normal(0.0, 0.5, size=t.shape)
        else:
            t.data = t.data.astype(np.float64)
    x = rng.normal(size=(3, 32))
    labels = {n: rng.integers(0, 256, (3, 1)) for n in ("km", "r", "k")}
    return cfg, params, x, labels


def model_check(seed: int, eps: float = 1e-4, max_coords: int | None = 10) -> float:
    """Max relative error of the full multi-head loss on the tiny model."""
    from forge import gpam
    with precision(64):
        cfg, params, x, labels = tiny_model_setup(seed)
        f = lambda: gpam.model_loss(x, labels, cfg, params)[0]  # noqa: E731
        return grad_check(f, list(params.values()), eps, max_coords=max_coords,
                          rng=np.random.default_rng(seed))


def run_suite(seeds=range(10), eps: float = 1e-4, max_coords: int | None = 10) -> dict:
    """Worst error per op (and for the model) over the given seeds."""
    worst: dict[str, float] = {}
    for s in seeds:
        for name, err in op_checks(s, eps).items():
            worst[name] = max(worst.get(name, 0.0), err)
        worst["gpam_tiny"] = max(worst.get("gpam_tiny", 0.0), model_check(s, eps, max_coords))
    return worst
