import random
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from forge import lattice
from forge.ec import TOY_CURVE, Signature
from forge.errors import RankDeficient, TooFewPairs, TooFewRecords
from forge.lattice import (HnpInstance, SignatureRecord, hnp_from_signatures, hnp_lattice,
                           lll_reduce, verify_lll)


def _planted(bits, count, seed):
    rng = random.Random(seed)
    n = lattice.random_prime(bits, rng)
    d = rng.randrange(1, n)
    return n, d, lattice.simulate_signatures(n, d, count, rng)


def test_hnp_pairs_by_hand():
    # 16-bit modulus: lambda = 12, half = 2^11
    n, d, k, h, r = 65521, 1234, 40000, 777, 5555
    s = pow(k, -1, n) * (h + r * d) % n
    a = k >> 12
    inst = hnp_from_signatures([Signature(r, s, h)], [a], n)
    assert inst.B == 2048
    assert inst.t == [pow(s, -1, n) * r % n]
    assert inst.u == [(pow(s, -1, n) * h - a * 4096 - 2048) % n]
    assert inst.residuals(d) == [(k - a * 4096) - 2048]
    assert inst.consistent(d)
    wrong = hnp_from_signatures([Signature(r, s, h)], [a ^ 0b1000], n)
    assert not wrong.consistent(d)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32))
def test_correct_msbs_satisfy_bound_wrong_ones_do_not(seed):
    n, d, sigs = _planted(64, 5, seed)
    tops = [k >> 60 for _, k in sigs]
    inst = hnp_from_signatures([s for s, _ in sigs], tops, n)
    assert inst.consistent(d)
    for i in range(5):
        bad = list(tops)
        bad[i] = (bad[i] + 3) % 16
        assert not hnp_from_signatures([s for s, _ in sigs], bad, n).consistent(d)


def test_lattice_shape_and_determinant():
    n, d, sigs = _planted(32, 6, 0)
    inst = hnp_from_signatures([s for s, _ in sigs], [k >> 28 for _, k in sigs], n)
    rows = hnp_lattice(inst)
    assert len(rows) == 8 and all(len(r) == 8 for r in rows)
    W = 1 << (n.bit_length() - inst.B.bit_length())
    det = lattice._det([[Fraction(x) for x in r] for r in rows])
    assert abs(det) == (W * n) ** 6 * (W * inst.B)
    with pytest.raises(TooFewPairs):
        hnp_lattice(HnpInstance(n, [1], [1], 4))


def test_target_vector_is_in_lattice():
    n, d, sigs = _planted(40, 7, 1)
    inst = hnp_from_signatures([s for s, _ in sigs], [k >> 36 for _, k in sigs], n)
    rows = hnp_lattice(inst)
    W = 1 << (n.bit_length() - inst.B.bit_length())
    # target = d * row_t + 1 * row_u + sum(c_i * W n e_i)
    v = [d * a + b for a, b in zip(rows[inst.m], rows[inst.m + 1])]
    res = inst.residuals(d)
    for i in range(inst.m):
        assert (v[i] - W * res[i]) % (W * n) == 0
    assert v[inst.m] == d - n // 2 and v[inst.m + 1] == W * inst.B


def test_lll_trivial_cases():
    eye = [[1 if i == j else 0 for j in range(5)] for i in range(5)]
    assert lll_reduce(eye) == eye
    with pytest.raises(RankDeficient):
        lll_reduce([[1, 2], [2, 4]])
    with pytest.raises(ValueError):
        lll_reduce(eye, delta=0.2)


def _gauss(u, v):
    # Lagrange-Gauss reduction, the 2-d oracle
    dot = lambda a, b: a[0] * b[0] + a[1] * b[1]  # noqa: E731
    if dot(u, u) > dot(v, v):
        u, v = v, u
    while True:
        q = round(Fraction(dot(u, v), dot(u, u)))
        v = [v[0] - q * u[0], v[1] - q * u[1]]
        if dot(v, v) >= dot(u, u):
            return u, v
        u, v = v, u


@settings(max_examples=50, deadline=None)
@given(st.integers(-10**6, 10**6), st.integers(-10**6, 10**6),
       st.integers(-10**6, 10**6), st.integers(-10**6, 10**6))
def test_lll_2d_matches_gauss(a, b, c, e):
    if a * e - b * c == 0:
        return
    red = lll_reduce([[a, b], [c, e]], delta=1)
    u, _ = _gauss([a, b], [c, e])
    assert red[0][0] ** 2 + red[0][1] ** 2 == u[0] ** 2 + u[1] ** 2
    assert verify_lll(red, [[a, b], [c, e]], delta=1).ok


@pytest.mark.parametrize("method", ["auto", "exact"])
def test_lll_random_10x10_verified(method):
    rng = np.random.default_rng(0)
    basis = [[int(x) for x in row] for row in rng.integers(-10**9, 10**9, (10, 10))]
    red = lll_reduce(basis, method=method)
    rep = verify_lll(red, basis)
    assert rep.size_reduced and rep.lovasz and rep.same_lattice


def test_verify_lll_rejects_bad_output():
    basis = [[1, 0], [0, 1]]
    assert not verify_lll([[1, 0], [5, 1]]).size_reduced
    assert verify_lll([[2, 0], [0, 1]], basis).same_lattice is False
    assert not verify_lll([[10, 0], [0, 1]]).lovasz


def test_lll_on_hnp_basis_is_verified():
    n, d, sigs = _planted(48, 16, 2)
    inst = hnp_from_signatures([s for s, _ in sigs], [k >> 44 for _, k in sigs], n)
    rows = hnp_lattice(inst)
    red = lll_reduce(rows)
    assert verify_lll(red, rows).ok


@pytest.mark.parametrize("seed", range(3))
def test_planted_96_bit_recovery(seed):
    n, d, sigs = _planted(96, 32, seed)
    inst = hnp_from_signatures([s for s, _ in sigs], [k >> 92 for _, k in sigs], n)
    assert lattice.solve_hnp(inst) == d


def _records(n, d, sigs, accuracy, rng):
    out = []
    for sig, k in sigs:
        top = lattice.top_byte(k, n)
        if rng.random() >= accuracy:
            top = (top + 16 * rng.randrange(1, 16)) % 256   # wrong nibble
        p = np.full(256, 0.02 / 255)
        p[top] = 0.98
        out.append(SignatureRecord(sig.h, sig.r, sig.s, p))
    return out


def test_attack_with_few_wrong_guesses():
    n, d, sigs = _planted(96, 200, 3)
    recs = _records(n, d, sigs, 0.95, random.Random(0))
    res = lattice.attack_ecdsa(recs, n=n, m=32, max_retries=10, seed=0)
    assert res.success and res.key == d and res.retries <= 10


def test_attack_fails_cleanly():
    n, d, sigs = _planted(64, 40, 4)
    recs = _records(n, d, sigs, 0.0, random.Random(0))
    res = lattice.attack_ecdsa(recs, n=n, m=24, max_retries=2, seed=0)
    assert not res.success and res.key is None and len(res.log) == 2
    with pytest.raises(TooFewRecords):
        lattice.attack_ecdsa(recs, n=n, m=41)
    with pytest.raises(TooFewRecords):
        lattice.attack_ecdsa(recs, n=n, m=24, max_conf=0.1)
    with pytest.raises(ValueError):
        lattice.attack_ecdsa(recs)


def test_verify_callback_can_veto():
    n, d, sigs = _planted(96, 64, 5)
    recs = _records(n, d, sigs, 1.0, random.Random(0))
    res = lattice.attack_ecdsa(recs, n=n, m=32, max_retries=2, verify=lambda c: c != d)
    assert not res.success
    res = lattice.attack_ecdsa(recs, n=n, m=32, max_retries=2, verify=lambda c: c == d)
    assert res.success and res.retries == 1


def test_uniform_weights_sample_uniformly():
    # weight_exp=0 must ignore confidences: chi-square over 20 bins
    conf = np.linspace(0.01, 1.0, 20)
    w = lattice.sampling_weights(conf, 0.0)
    assert np.allclose(w, 1 / 20)
    rng = np.random.default_rng(0)
    counts = np.bincount(rng.choice(20, size=20_000, p=w), minlength=20)
    chi2 = ((counts - 1000) ** 2 / 1000).sum()
    assert chi2 < 43.8   # 99.9% quantile, 19 dof
    w8 = lattice.sampling_weights(conf, 8.0)
    assert w8[-1] / w8[0] == pytest.approx(100.0 ** 8)


def test_top_byte_and_toy_order_guard():
    assert lattice.top_byte(0xAB << 88, 2**96 - 1) == 0xAB
    recs = [SignatureRecord(1, 1, 1, lattice.oracle_probs(0))] * 4
    with pytest.raises(ValueError):
        lattice.attack_ecdsa(recs, curve=TOY_CURVE, m=2)


def test_reduction_modes():
    n, d, sigs = _planted(96, 32, 6)
    inst = hnp_from_signatures([s for s, _ in sigs], [k >> 92 for _, k in sigs], n)
    assert lattice.solve_hnp(inst, reduction="lll") == d
    with pytest.raises(ValueError):
        lattice.solve_hnp(inst, reduction="magic")


def test_bkz_stage_finds_key_lll_misses():
    pytest.importorskip("fpylll")
    # 128-bit modulus, m just above the information bound: on these two
    # instances the built-in LLL alone finds nothing and BKZ does
    for seed in (10, 11):
        n, d, sigs = _planted(128, 38, seed)
        inst = hnp_from_signatures([s for s, _ in sigs], [k >> 124 for _, k in sigs], n)
        assert lattice.solve_hnp(inst, reduction="lll") is None
        assert lattice.solve_hnp(inst, reduction="bkz") == d
    rows = hnp_lattice(inst)
    for beta, red in lattice.bkz_tours(rows, (10,)):
        rep = verify_lll(red, rows)
        # fpylll size-reduces to eta = 0.51, not 1/2
        assert beta == 10 and rep.lovasz and rep.same_lattice
        assert rep.worst_mu <= Fraction(51, 100)
