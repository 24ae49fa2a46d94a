"""Side-channel metrics over 256-way probability vectors.

Ranks come in two flavours. ``rank`` counts candidates with strictly higher
probability and breaks ties by placing lower byte values first, so it is a
deterministic integer. ``midpoint_rank`` counts strictly higher candidates
plus half of the other tied candidates; a uniform prediction then has rank
127.5, which is the random-guess baseline. Summaries and guessing entropy use
the midpoint form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from forge import masking
from forge.errors import EmptyList, EmptySet, PoolTooSmall

LOG_CLAMP = 1e-40
_XOR = np.arange(256)[:, None] ^ np.arange(256)[None, :]


@dataclass
class PredictionSet:
    """Eval-mode outputs: head name -> (N, 256) probabilities, plus true bytes."""

    probs: dict[str, np.ndarray]
    labels: dict[str, np.ndarray]

    def __len__(self) -> int:
        return len(next(iter(self.labels.values()))) if self.labels else 0


def _counts(probs: np.ndarray, true: np.ndarray):
    probs = np.asarray(probs)
    true = np.asarray(true)
    p_true = np.take_along_axis(probs, true[..., None], axis=-1)
    greater = (probs > p_true).sum(-1)
    equal_mask = probs == p_true
    equal = equal_mask.sum(-1) - 1
    lower_tied = (equal_mask & (np.arange(probs.shape[-1]) < true[..., None])).sum(-1)
    return greater, equal, lower_tied


def rank(probs, true_byte):
    """Strictly-greater count, ties resolved with lower byte values first.

    Works on a single vector or on a batch (..., V) with matching true bytes.
    """
    greater, _, lower_tied = _counts(probs, np.asarray(true_byte))
    out = greater + lower_tied
    return int(out) if np.ndim(out) == 0 else out


def midpoint_rank(probs, true_byte):
    greater, equal, _ = _counts(probs, np.asarray(true_byte))
    out = greater + equal / 2.0
    return float(out) if np.ndim(out) == 0 else out


def metrics_summary(probs: np.ndarray, labels: np.ndarray) -> dict:
    """Accuracy plus mean and max rank over a set of predictions.

    ``mean_rank`` and ``max_rank`` use the midpoint rank; the ``*_strict``
    variants use the tie-broken integer rank.
    """
    probs = np.asarray(probs)
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise EmptySet("no predictions")
    strict = rank(probs, labels)
    mid = midpoint_rank(probs, labels)
    return {"count": int(len(labels)),
            "accuracy": float(np.mean(strict == 0)),
            "mean_rank": float(np.mean(mid)),
            "max_rank": float(np.max(mid)),
            "mean_rank_strict": float(np.mean(strict)),
            "max_rank_strict": int(np.max(strict))}


def confidence(probs):
    """Top-1 minus top-2 probability (batch aware)."""
    top2 = np.partition(np.asarray(probs), -2, axis=-1)[..., -2:]
    out = top2[..., 1] - top2[..., 0]
    return float(out) if np.ndim(out) == 0 else out


def confidence_histogram(conf, bins: int = 32) -> dict:
    counts, edges = np.histogram(np.asarray(conf), bins=bins, range=(0.0, 1.0))
    return {"edges": edges.tolist(), "counts": counts.tolist()}


def msb4_aggregate(probs):
    """Marginalise the low nibble: out[m] = sum_l probs[16 m + l]."""
    probs = np.asarray(probs)
    return probs.reshape(probs.shape[:-1] + (16, 16)).sum(-1)


def combine_shares_xor(px, py):
    """Distribution of x ^ y for independent bytes x, y (batch aware)."""
    px = np.asarray(px)
    py = np.asarray(py)
    return (px[..., _XOR] * py[..., None, :]).sum(-1)


def ml_accumulate(prob_list, clamp: float = LOG_CLAMP) -> np.ndarray:
    """score[c] = sum_t log(max(p_t[c], clamp))."""
    arr = np.asarray(prob_list, dtype=np.float64)
    if arr.size == 0:
        raise EmptyList("no probability vectors to accumulate")
    if arr.ndim == 1:
        arr = arr[None]
    return np.log(np.maximum(arr, clamp)).sum(axis=0)


def guessing_entropy(probs, true_value: int, counts, n_samples: int = 10_000,
                     rng: np.random.Generator | None = None, clamp: float = LOG_CLAMP,
                     exact: bool | None = None) -> np.ndarray:
    """Mean midpoint rank of ``true_value`` after ML accumulation over random
    subsets of the attack pool, one value per requested subset size.

    Args:
        probs: (N, V) per-trace probabilities that share one true value.
        counts: subset sizes.
        n_samples: subsets drawn per size; sizes with at most that many
            distinct subsets are enumerated exactly instead (``exact`` forces
            one behaviour or the other).
    """
    probs = np.asarray(probs, dtype=np.float64)
    counts = [int(c) for c in np.atleast_1d(counts)]
    N = len(probs)
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if not counts or min(counts) < 1:
        raise ValueError("counts must be >= 1")
    if max(counts) > N:
        raise PoolTooSmall(f"pool has {N} traces, {max(counts)} requested")
    logp = np.log(np.maximum(probs, clamp))
    out = np.zeros(len(counts))
    sampled = []
    for j, c in enumerate(counts):
        use_exact = exact if exact is not None else math.comb(N, c) <= n_samples
        if use_exact:
            subsets = np.array(list(combinations(range(N), c)), dtype=np.intp)
            total = 0.0
            for start in range(0, len(subsets), 4096):
                scores = logp[subsets[start:start + 4096]].sum(axis=1)
                total += float(np.sum(midpoint_rank(scores, np.full(len(scores), true_value))))
            out[j] = total / len(subsets)
        else:
            sampled.append(j)
    if sampled:
        rng = rng or np.random.default_rng(0)
        cmax = max(counts[j] for j in sampled)
        sums = np.zeros(len(sampled))
        chunk = max(1, 2_000_000 // (cmax * probs.shape[1]))
        done = 0
        while done < n_samples:
            b = min(chunk, n_samples - done)
            # nested prefixes of a random order are uniform subsets of every size
            order = np.argsort(rng.random((b, N)), axis=1)[:, :cmax]
            cum = np.cumsum(logp[order], axis=1)
            for slot, j in enumerate(sampled):
                scores = cum[:, counts[j] - 1]
                sums[slot] += float(np.sum(midpoint_rank(scores, np.full(b, true_value))))
            done += b
        for slot, j in enumerate(sampled):
            out[j] = sums[slot] / n_samples
    return out


# --- AES share recombination ---------------------------------------------

def unmask_multiplicative(p_y, p_rm):
    """Distribution of z = y * r_m^-1 in GF(2^8), given P(y) and P(r_m).

    The r_m = 0 class is impossible and is dropped before renormalising.
    """
    p_y = np.asarray(p_y, dtype=np.float64)
    p_rm = np.asarray(p_rm, dtype=np.float64)
    w = p_rm[..., 1:]
    w = w / np.maximum(w.sum(-1, keepdims=True), 1e-300)
    # y = rm * z  ->  P(z) = sum_rm P(rm) P(y = rm * z)
    table = p_y[..., masking.GF_MUL[1:, :]]          # (..., 255, 256)
    out = (w[..., :, None] * table).sum(-2)
    return out / np.maximum(out.sum(-1, keepdims=True), 1e-300)


def aes_key_probs(p_c, p_rm, p_rout, pt) -> np.ndarray:
    """Per-trace key-byte probabilities from the three share predictions.

    c = r_m * Sbox(pt ^ k) ^ r_out, so the additive share is removed with an
    XOR convolution, the multiplicative one by summing over r_m, and the key
    hypothesis kappa scores P(z = Sbox(pt ^ kappa)).
    """
    p_y = combine_shares_xor(p_c, p_rout)
    p_z = unmask_multiplicative(p_y, p_rm)
    pt = np.asarray(pt, dtype=np.intp)
    z_idx = masking.SBOX[pt[..., None] ^ np.arange(256)]
    return np.take_along_axis(p_z, z_idx.astype(np.intp), axis=-1)


def fixed_key_view(pt, key):
    """Rewrite a variable-key set as if the key were all zero: pt' = pt ^ k."""
    pt = np.asarray(pt, dtype=np.uint8)
    key = np.asarray(key, dtype=np.uint8)
    return pt ^ key, np.zeros_like(key)
