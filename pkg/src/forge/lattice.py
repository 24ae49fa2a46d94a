"""Nonce-MSB leakage to ECDSA key recovery through the hidden number problem.

Each signature with a guessed top nibble of its nonce gives a relation
``e_i = t_i d + u_i (mod n)`` with ``|e_i| <= B``. A short vector of the
lattice built from those relations carries ``d``; LLL finds it when enough
guesses are right.
"""

from __future__ import annotations

import logging
import math
import random
import time
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from forge import metrics
from forge.ec import (INFINITY, CurveParams, Point, Signature, ecdsa_verify, mod_inv,
                      scalar_mul)
from forge.errors import NonInvertible, RankDeficient, TooFewPairs, TooFewRecords

log = logging.getLogger(__name__)

KNOWN_BITS = 4


@dataclass
class HnpInstance:
    n: int
    t: list[int]
    u: list[int]
    B: int
    known_bits: int = KNOWN_BITS

    @property
    def m(self) -> int:
        return len(self.t)

    def residuals(self, d: int) -> list[int]:
        """Centred ``t_i d + u_i mod n`` for a candidate key."""
        out = []
        for t, u in zip(self.t, self.u):
            e = (t * d + u) % self.n
            out.append(e - self.n if e > self.n // 2 else e)
        return out

    def consistent(self, d: int) -> bool:
        return all(-self.B <= e <= self.B for e in self.residuals(d))


@dataclass
class SignatureRecord:
    h: int
    r: int
    s: int
    probs: np.ndarray | None = None   # 256 probabilities for the nonce's top byte


def _split_shift(n: int, known_bits: int) -> int:
    lam = n.bit_length() - known_bits
    if lam < 2:
        raise ValueError("modulus too small for the requested number of known bits")
    return lam


def hnp_from_signatures(sigs: Sequence, msb_guess: Sequence[int], n: int,
                        known_bits: int = KNOWN_BITS) -> HnpInstance:
    """Turn signatures and guessed top nonce bits into HNP pairs.

    With lambda = bitlen(n) - known_bits and k = a 2^lambda + e, the centred
    error e - 2^(lambda-1) equals t d + u mod n for t = r/s and
    u = h/s - a 2^lambda - 2^(lambda-1).
    """
    if len(sigs) != len(msb_guess):
        raise ValueError("one guess per signature is required")
    lam = _split_shift(n, known_bits)
    half = 1 << (lam - 1)
    ts, us = [], []
    for sig, a in zip(sigs, msb_guess):
        s_inv = mod_inv(sig.s, n)
        ts.append(s_inv * sig.r % n)
        us.append((s_inv * sig.h - (int(a) << lam) - half) % n)
    return HnpInstance(n, ts, us, half, known_bits)


def hnp_lattice(inst: HnpInstance) -> list[list[int]]:
    """(m+2)-dimensional embedding basis.

    Rows: ``W n e_i`` for i < m, ``(W t_0 .. W t_{m-1}, 1, 0)`` and
    ``(W u_0 .. W u_{m-1}, -(n//2), C)``, where W = 2^(bitlen(n) - bitlen(B))
    rescales the error coordinates to the size of n and C = W B. The target
    vector is ``(W e_0', .., W e_{m-1}', d - n//2, C)``; every coordinate is
    at most about n/2.
    """
    m = inst.m
    if m < 2:
        raise TooFewPairs(f"need at least 2 pairs, got {m}")
    n = inst.n
    W = 1 << max(0, n.bit_length() - inst.B.bit_length())
    C = W * inst.B
    rows = []
    for i in range(m):
        row = [0] * (m + 2)
        row[i] = W * n
        rows.append(row)
    rows.append([W * t for t in inst.t] + [1, 0])
    # d is recentred as well: the target's coordinate m is d - n//2
    rows.append([W * u for u in inst.u] + [-(n // 2), C])
    return rows


# --- LLL -------------------------------------------------------------------

def _rank_mod_p(rows: list[list[int]], p: int) -> int:
    mat = [[x % p for x in row] for row in rows]
    rank, cols = 0, len(mat[0]) if mat else 0
    for c in range(cols):
        piv = next((r for r in range(rank, len(mat)) if mat[r][c]), None)
        if piv is None:
            continue
        mat[rank], mat[piv] = mat[piv], mat[rank]
        inv = pow(mat[rank][c], -1, p)
        for r in range(len(mat)):
            if r != rank and mat[r][c]:
                f = mat[r][c] * inv % p
                mat[r] = [(a - f * b) % p for a, b in zip(mat[r], mat[rank])]
        rank += 1
    return rank


def _rank_exact(rows: list[list[int]]) -> int:
    mat = [[Fraction(x) for x in row] for row in rows]
    rank, cols = 0, len(mat[0]) if mat else 0
    for c in range(cols):
        piv = next((r for r in range(rank, len(mat)) if mat[r][c] != 0), None)
        if piv is None:
            continue
        mat[rank], mat[piv] = mat[piv], mat[rank]
        for r in range(rank + 1, len(mat)):
            if mat[r][c] != 0:
                f = mat[r][c] / mat[rank][c]
                mat[r] = [a - f * b for a, b in zip(mat[r], mat[rank])]
        rank += 1
    return rank


def _check_full_rank(rows: list[list[int]]) -> None:
    d = len(rows)
    if d == 0 or d > len(rows[0]):
        raise RankDeficient("basis must have at most as many rows as columns")
    # a 61-bit prime: full rank mod p implies full rank over Q
    if _rank_mod_p(rows, (1 << 61) - 1) == d:
        return
    if _rank_exact(rows) < d:
        raise RankDeficient("basis rows are linearly dependent")


def _lll_float(rows: list[list[int]], delta: float, eta: float = 0.51,
               max_loops: int = 200_000) -> list[list[int]]:
    """Schnorr-Euchner LLL: float Gram-Schmidt, exact integer row operations."""
    d = len(rows)
    B = np.empty((d, len(rows[0])), dtype=object)
    for i, row in enumerate(rows):
        B[i, :] = row
    top = max(max(abs(x) for x in row).bit_length() for row in rows)
    shift = max(0, top - 400)

    def to_float(vec):
        if shift:
            return np.array([float(x >> shift) for x in vec], dtype=np.float64)
        return np.array([float(x) for x in vec], dtype=np.float64)

    Bf = np.array([to_float(B[i]) for i in range(d)])
    mu = np.eye(d)
    rr = np.zeros(d)
    rr[0] = Bf[0] @ Bf[0]
    k, loops = 1, 0
    while k < d:
        loops += 1
        if loops > max_loops:
            log.warning("float LLL gave up after %d loops; finishing exactly", loops)
            break
        while True:
            dots = Bf[:k] @ Bf[k]
            # unit lower-triangular solve for the unnormalised coefficients
            r = np.linalg.solve(mu[:k, :k], dots) if k > 1 else dots
            mu[k, :k] = r / rr[:k]
            rr[k] = Bf[k] @ Bf[k] - mu[k, :k] @ r
            big = np.flatnonzero(np.abs(mu[k, :k]) > eta)
            if not len(big):
                break
            changed = False
            for j in range(int(big[-1]), -1, -1):
                q = round(float(mu[k, j]))
                if q:
                    changed = True
                    B[k] = B[k] - q * B[j]
                    mu[k, :j] -= q * mu[j, :j]
                    mu[k, j] -= q
            if not changed:
                break
            Bf[k] = to_float(B[k])
        if rr[k] >= (delta - mu[k, k - 1] ** 2) * rr[k - 1]:
            k += 1
        else:
            B[[k - 1, k]] = B[[k, k - 1]]
            Bf[[k - 1, k]] = Bf[[k, k - 1]]
            if k == 1:
                rr[0] = Bf[0] @ Bf[0]
            k = max(k - 1, 1)
    return [[int(x) for x in B[i]] for i in range(d)]


def _lll_exact(rows: list[list[int]], delta: Fraction) -> list[list[int]]:
    """Integral LLL (all Gram-Schmidt data kept as exact integers)."""
    p, q = delta.numerator, delta.denominator
    n = len(rows)
    b = [None] + [list(r) for r in rows]          # 1-based
    dd = [1] + [0] * n                             # d_0 = 1
    lam = [[0] * (n + 1) for _ in range(n + 1)]

    def dot(x, y):
        return sum(a * c for a, c in zip(x, y))

    def red(k, l):
        if 2 * abs(lam[k][l]) > dd[l]:
            qq = (2 * lam[k][l] + dd[l]) // (2 * dd[l])
            b[k] = [x - qq * y for x, y in zip(b[k], b[l])]
            lam[k][l] -= qq * dd[l]
            for i in range(1, l):
                lam[k][i] -= qq * lam[l][i]

    def swap(k, kmax):
        b[k], b[k - 1] = b[k - 1], b[k]
        for j in range(1, k - 1):
            lam[k][j], lam[k - 1][j] = lam[k - 1][j], lam[k][j]
        lk = lam[k][k - 1]
        Bn = (dd[k - 2] * dd[k] + lk * lk) // dd[k - 1]
        for i in range(k + 1, kmax + 1):
            t = lam[i][k]
            lam[i][k] = (dd[k] * lam[i][k - 1] - lk * t) // dd[k - 1]
            lam[i][k - 1] = (Bn * t + lk * lam[i][k]) // dd[k]
        dd[k - 1] = Bn

    dd[1] = dot(b[1], b[1])
    if dd[1] == 0:
        raise RankDeficient("zero vector in basis")
    k, kmax = 2, 1
    while k <= n:
        if k > kmax:
            kmax = k
            for j in range(1, k + 1):
                u = dot(b[k], b[j])
                for i in range(1, j):
                    u = (dd[i] * u - lam[k][i] * lam[j][i]) // dd[i - 1]
                if j < k:
                    lam[k][j] = u
                else:
                    if u == 0:
                        raise RankDeficient("basis rows are linearly dependent")
                    dd[k] = u
        red(k, k - 1)
        if q * dd[k] * dd[k - 2] < p * dd[k - 1] ** 2 - q * lam[k][k - 1] ** 2:
            swap(k, kmax)
            k = max(2, k - 1)
        else:
            for l in range(k - 2, 0, -1):
                red(k, l)
            k += 1
    return [list(r) for r in b[1:]]


def lll_reduce(basis: Sequence[Sequence[int]], delta: float | Fraction = Fraction(99, 100),
               method: str = "auto") -> list[list[int]]:
    """delta-LLL-reduce the rows of an integer basis.

    ``auto`` runs a floating-point pass first and then an exact pass, so the
    result is always exactly size-reduced and satisfies Lovász for ``delta``.
    ``exact`` skips the float pass.
    """
    rows = [[int(x) for x in row] for row in basis]
    if not rows:
        raise RankDeficient("empty basis")
    _check_full_rank(rows)
    delta_q = Fraction(delta).limit_denominator(10**6)
    if not Fraction(1, 4) < delta_q <= 1:
        raise ValueError("delta must be in (1/4, 1]")
    if len(rows) == 1:
        return rows
    if method == "auto":
        rows = _lll_float(rows, float(delta_q))
    elif method != "exact":
        raise ValueError(f"unknown method {method!r}")
    return _lll_exact(rows, delta_q)


def gram_schmidt_exact(rows: Sequence[Sequence[int]]):
    """Exact Gram-Schmidt: (mu as Fractions, squared norms of b*_i)."""
    n = len(rows)
    bstar: list[list[Fraction]] = []
    norms: list[Fraction] = []
    mu = [[Fraction(0)] * n for _ in range(n)]
    for i in range(n):
        v = [Fraction(x) for x in rows[i]]
        for j in range(i):
            if norms[j] == 0:
                continue
            mu[i][j] = sum(Fraction(a) * c for a, c in zip(rows[i], bstar[j])) / norms[j]
            v = [a - mu[i][j] * c for a, c in zip(v, bstar[j])]
        bstar.append(v)
        norms.append(sum(x * x for x in v))
        mu[i][i] = Fraction(1)
    return mu, norms


def _solve_change_of_basis(src: list[list[int]], dst: list[list[int]]):
    """U with dst = U src (exact), or None when dst is not in the row span."""
    n, cols = len(src), len(src[0])
    # pick n independent columns of src
    mat = [[Fraction(x) for x in row] for row in src]
    piv_cols, work, r = [], [row[:] for row in mat], 0
    for c in range(cols):
        piv = next((i for i in range(r, n) if work[i][c] != 0), None)
        if piv is None:
            continue
        work[r], work[piv] = work[piv], work[r]
        for i in range(r + 1, n):
            f = work[i][c] / work[r][c]
            if f:
                work[i] = [a - f * b for a, b in zip(work[i], work[r])]
        piv_cols.append(c)
        r += 1
        if r == n:
            break
    if r < n:
        return None
    S = [[mat[i][c] for c in piv_cols] for i in range(n)]      # n x n
    # solve U S = D  <=>  S^T U^T = D^T
    ST = [[S[j][i] for j in range(n)] for i in range(n)]
    U = []
    for row in dst:
        rhs = [Fraction(row[c]) for c in piv_cols]
        aug = [ST[i][:] + [rhs[i]] for i in range(n)]
        for c in range(n):
            piv = next(i for i in range(c, n) if aug[i][c] != 0)
            aug[c], aug[piv] = aug[piv], aug[c]
            for i in range(n):
                if i != c and aug[i][c] != 0:
                    f = aug[i][c] / aug[c][c]
                    aug[i] = [a - f * b for a, b in zip(aug[i], aug[c])]
        x = [aug[i][n] / aug[i][i] for i in range(n)]
        # the solution must also reproduce the non-pivot columns
        for c in range(cols):
            if sum(x[i] * src[i][c] for i in range(n)) != row[c]:
                return None
        U.append(x)
    return U


def _det(mat: list[list[Fraction]]) -> Fraction:
    a = [row[:] for row in mat]
    n, det = len(a), Fraction(1)
    for c in range(n):
        piv = next((i for i in range(c, n) if a[i][c] != 0), None)
        if piv is None:
            return Fraction(0)
        if piv != c:
            a[c], a[piv] = a[piv], a[c]
            det = -det
        det *= a[c][c]
        for i in range(c + 1, n):
            f = a[i][c] / a[c][c]
            if f:
                a[i] = [x - f * y for x, y in zip(a[i], a[c])]
    return det


@dataclass
class LllReport:
    size_reduced: bool
    lovasz: bool
    same_lattice: bool | None
    worst_mu: Fraction = Fraction(0)

    @property
    def ok(self) -> bool:
        return self.size_reduced and self.lovasz and self.same_lattice is not False


def verify_lll(reduced, original=None, delta=Fraction(99, 100)) -> LllReport:
    """Independent exact check of an LLL output (and of its lattice if given)."""
    delta = Fraction(delta)
    mu, norms = gram_schmidt_exact(reduced)
    n = len(reduced)
    worst = max((abs(mu[i][j]) for i in range(n) for j in range(i)), default=Fraction(0))
    size_ok = worst <= Fraction(1, 2)
    lov_ok = all(norms[i + 1] >= (delta - mu[i + 1][i] ** 2) * norms[i] for i in range(n - 1))
    same = None
    if original is not None:
        U = _solve_change_of_basis([list(r) for r in original], [list(r) for r in reduced])
        same = (U is not None and all(x.denominator == 1 for row in U for x in row)
                and abs(_det(U)) == 1)
    return LllReport(size_ok, lov_ok, same, worst)


# --- key extraction and the attack loop ------------------------------------

def candidates_from_basis(rows: Sequence[Sequence[int]], m: int, n: int) -> list[int]:
    """Key candidates from every row's coordinate m, both signs (deduplicated)."""
    seen, out = set(), []
    half = n // 2
    for row in rows:
        v = row[m]
        for c in ((v + half) % n, (half - v) % n):
            if c and c not in seen:
                seen.add(c)
                out.append(c)
    return out


BKZ_BLOCKS = (10, 15, 20, 25, 30, 35, 40)


def have_bkz() -> bool:
    """True when the optional fpylll backend can be imported."""
    try:
        import fpylll  # noqa: F401
    except ImportError:
        return False
    return True


def bkz_tours(rows: Sequence[Sequence[int]], blocks: Sequence[int] = BKZ_BLOCKS,
              max_loops: int = 4):
    """Progressive BKZ through fpylll; yields (block size, reduced rows) per stage."""
    try:
        from fpylll import BKZ, LLL, IntegerMatrix
        from fpylll.algorithms.bkz2 import BKZReduction
    except ImportError as exc:
        raise ImportError("BKZ needs the optional fpylll package "
                          "(pip install 'artifact[bkz]')") from exc
    A = IntegerMatrix.from_matrix([list(r) for r in rows])
    LLL.reduction(A)
    red = BKZReduction(A)
    for beta in blocks:
        beta = min(beta, A.nrows)
        red(BKZ.Param(beta, max_loops=max_loops, flags=BKZ.AUTO_ABORT | BKZ.MAX_LOOPS))
        yield beta, [list(A[i]) for i in range(A.nrows)]
        if beta == A.nrows:
            return


def solve_hnp(inst: HnpInstance, delta=Fraction(99, 100), reduction: str = "auto",
              bkz_blocks: Sequence[int] = BKZ_BLOCKS) -> int | None:
    """Reduce the embedding lattice and return a key consistent with every pair.

    ``reduction`` is "lll" (built-in LLL only), "bkz" (fpylll progressive BKZ
    after the built-in LLL) or "auto" (BKZ only when LLL finds nothing and
    fpylll is installed).
    """
    if reduction not in ("auto", "lll", "bkz"):
        raise ValueError(f"unknown reduction {reduction!r}")

    def scan(rows):
        for c in candidates_from_basis(rows, inst.m, inst.n):
            if inst.consistent(c):
                return c
        return None

    reduced = lll_reduce(hnp_lattice(inst), delta)
    found = scan(reduced)
    if found is not None or reduction == "lll":
        return found
    if reduction == "auto" and not have_bkz():
        return None
    for beta, rows in bkz_tours(reduced, bkz_blocks):
        found = scan(rows)
        log.info("BKZ-%d: %s", beta, "key found" if found is not None else "no key")
        if found is not None:
            return found
    return None


@dataclass
class AttackResult:
    success: bool
    key: int | None
    retries: int
    log: list[dict] = field(default_factory=list)
    seconds: float = 0.0

    def to_json(self) -> dict:
        return {"success": self.success, "key": hex(self.key) if self.key is not None else None,
                "retries": self.retries, "seconds": round(self.seconds, 3), "log": self.log}


def msb_guesses(records: Sequence[SignatureRecord]):
    """(top-nibble guess, confidence) for every record from its top-byte probs."""
    probs = np.array([r.probs for r in records], dtype=np.float64)
    agg = metrics.msb4_aggregate(probs)
    return np.argmax(agg, axis=1), metrics.confidence(agg)


def sampling_weights(conf: np.ndarray, weight_exp: float) -> np.ndarray:
    w = np.maximum(np.asarray(conf, dtype=np.float64), 1e-12) ** weight_exp
    return w / w.sum()


def attack_ecdsa(records: Sequence[SignatureRecord], curve: CurveParams | None = None,
                 m: int = 80, weight_exp: float = 1.0, max_conf: float | None = None,
                 max_retries: int = 100, seed: int = 0, public_key: Point | None = None,
                 n: int | None = None, verify: Callable[[int], bool] | None = None,
                 delta=Fraction(99, 100), reduction: str = "auto") -> AttackResult:
    """Sample, reduce, extract, verify; repeat until a key verifies.

    Args:
        records: signatures with probabilities for the nonce's top byte.
        curve: used to confirm candidates (``d G`` against ``public_key`` if
            given, otherwise ECDSA verification of two records).
        m: signatures per lattice.
        weight_exp: sampling weight is confidence ** weight_exp; 0 is uniform.
        max_conf: drop records whose confidence exceeds this before sampling.
        n: group order when no curve is supplied (pure HNP mode, confirmed
            with ``verify`` or with the sampled relations only).
        reduction: "auto", "lll" or "bkz"; see ``solve_hnp``.
    """
    t0 = time.time()
    if curve is None and n is None:
        raise ValueError("either a curve or a modulus is required")
    n = curve.n if curve is not None else n
    if n.bit_length() % 8:
        raise ValueError("top-byte predictions need a modulus whose bit length is a multiple of 8")
    if len(records) < m:
        raise TooFewRecords(f"{len(records)} records, need at least {m}")
    guesses, conf = msb_guesses(records)
    pool = np.arange(len(records))
    if max_conf is not None:
        pool = pool[conf[pool] <= max_conf]
        if len(pool) < m:
            raise TooFewRecords(f"only {len(pool)} records with confidence <= {max_conf}")
    rng = np.random.default_rng(seed)
    weights = sampling_weights(conf[pool], weight_exp)

    def confirm(d: int) -> bool:
        if verify is not None and not verify(d):
            return False
        if curve is None:
            return True
        Q = scalar_mul(d, curve.G, curve)
        if Q is INFINITY:
            return False
        if public_key is not None:
            return Q == public_key
        return all(ecdsa_verify(Signature(rec.r, rec.s, rec.h), Q, curve)
                   for rec in records[:2])

    attempts = []
    for attempt in range(1, max_retries + 1):
        pick = rng.choice(pool, size=m, replace=False, p=weights)
        sigs = [records[i] for i in pick]
        try:
            inst = hnp_from_signatures(sigs, [int(guesses[i]) for i in pick], n)
        except NonInvertible:
            attempts.append({"attempt": attempt, "error": "non-invertible s"})
            continue
        found = solve_hnp(inst, delta, reduction)
        ok = found is not None and confirm(found)
        attempts.append({"attempt": attempt, "min_conf": float(conf[pick].min()),
                         "mean_conf": float(conf[pick].mean()), "verified": ok})
        log.info("attempt %d: %s", attempt, "key verified" if ok else "no key")
        if ok:
            return AttackResult(True, found, attempt, attempts, time.time() - t0)
    return AttackResult(False, None, max_retries, attempts, time.time() - t0)


# --- simulation helpers ------------------------------------------------------

def random_prime(bits: int, rng: random.Random, top_byte_ff: bool = True) -> int:
    """Random prime of exactly ``bits`` bits; by default with its top byte 0xFF,
    the shape of standard curve orders."""
    from forge.masking import _is_probable_prime
    high = 0xFF << (bits - 8) if top_byte_ff else 1 << (bits - 1)
    while True:
        c = rng.getrandbits(bits) | high | 1
        if _is_probable_prime(c):
            return c


def simulate_signatures(n: int, d: int, count: int, rng: random.Random,
                        curve: CurveParams | None = None):
    """Signature-like tuples (h, r, s) with their nonces.

    With a curve these are real ECDSA signatures; without one ``r`` is a random
    residue, which is all the HNP relations need.
    """
    from forge.ec import ecdsa_sign
    from forge.errors import DegenerateNonce
    out = []
    while len(out) < count:
        k = rng.randrange(1, n)
        h = rng.randrange(0, n)
        if curve is not None:
            try:
                sig = ecdsa_sign(h, d, k, curve)
            except DegenerateNonce:
                continue
        else:
            r = rng.randrange(1, n)
            s = mod_inv(k, n) * (h + r * d) % n
            if s == 0:
                continue
            sig = Signature(r, s, h)
        out.append((sig, k))
    return out


def top_byte(k: int, n: int) -> int:
    return k >> (n.bit_length() - 8)


def oracle_probs(top: int) -> np.ndarray:
    p = np.zeros(256)
    p[top] = 1.0
    return p
