import random

import pytest
from hypothesis import given, settings, strategies as st

from forge.ec import (INFINITY, P256, TOY_CURVE, CurveParams, Point, Signature, ecdsa_sign,
                      ecdsa_verify, format_curve_config, load_curve, mod_inv,
                      parse_curve_config, point_add, public_key, recover_priv_from_nonce,
                      scalar_mul)
from forge.errors import DegenerateNonce, NonInvertible, PointNotOnCurve

# Multiples 0..19 of G on the toy curve, from an independent repeated-addition
# oracle (affine formulas with Fermat inverses), frozen here.
TOY_MULTIPLES = [INFINITY, (5, 1), (6, 3), (10, 6), (3, 1), (9, 16), (16, 13), (0, 6),
                 (13, 7), (7, 6), (7, 11), (13, 10), (0, 11), (16, 4), (9, 1), (3, 16),
                 (10, 11), (6, 14), (5, 16), INFINITY]


def _as_tuple(P):
    return P if P is INFINITY else (P.x, P.y)


def test_mod_inv_examples():
    assert mod_inv(1, 19) == 1
    assert mod_inv(5, 19) == 4
    with pytest.raises(NonInvertible):
        mod_inv(4, 8)
    with pytest.raises(ValueError):
        mod_inv(3, 1)


@given(st.integers(min_value=1, max_value=10**6), st.sampled_from([19, 97, 2**61 - 1, P256.n]))
def test_mod_inv_property(x, m):
    if x % m == 0:
        return
    y = mod_inv(x, m)
    assert 0 <= y < m and x * y % m == 1


def test_toy_multiples_match_oracle():
    for k, expected in enumerate(TOY_MULTIPLES):
        assert _as_tuple(scalar_mul(k, TOY_CURVE.G, TOY_CURVE)) == expected


def test_scalar_mul_edge_cases():
    G = TOY_CURVE.G
    assert scalar_mul(1, G, TOY_CURVE) == G
    assert scalar_mul(19, G, TOY_CURVE) is INFINITY
    assert scalar_mul(5, INFINITY, TOY_CURVE) is INFINITY
    with pytest.raises(PointNotOnCurve):
        scalar_mul(2, Point(1, 1), TOY_CURVE)
    with pytest.raises(ValueError):
        scalar_mul(-1, G, TOY_CURVE)


def test_toy_group_law_exhaustive():
    G = TOY_CURVE.G
    for a in range(19):
        for b in range(19):
            lhs = scalar_mul(a + b, G, TOY_CURVE)
            rhs = point_add(scalar_mul(a, G, TOY_CURVE), scalar_mul(b, G, TOY_CURVE), TOY_CURVE)
            assert lhs == rhs
            assert TOY_CURVE.contains(lhs)


@settings(max_examples=10, deadline=None)
@given(st.integers(1, P256.n - 1), st.integers(1, P256.n - 1))
def test_p256_group_law_sampled(a, b):
    G = P256.G
    lhs = scalar_mul((a + b) % P256.n, G, P256)
    rhs = point_add(scalar_mul(a, G, P256), scalar_mul(b, G, P256), P256)
    assert lhs == rhs
    assert P256.contains(lhs)


def test_p256_order():
    assert scalar_mul(P256.n, P256.G, P256) is INFINITY


def test_sign_fixed_toy_vector():
    # r, s worked out from the multiples table: 3G = (10, 6)
    assert ecdsa_sign(10, 7, 3, TOY_CURVE) == Signature(r=10, s=14, h=10)


def test_degenerate_nonce_on_toy_curve():
    # 7G and 12G have x = 0, so r = 0
    for k in (7, 12):
        with pytest.raises(DegenerateNonce):
            ecdsa_sign(3, 5, k, TOY_CURVE)


def test_toy_sign_verify_recover_exhaustive():
    for d in range(2, 18):
        Q = public_key(d, TOY_CURVE)
        for k in range(1, 19):
            for h in (0, 4, 11):
                try:
                    sig = ecdsa_sign(h, d, k, TOY_CURVE)
                except DegenerateNonce:
                    continue
                assert ecdsa_verify(sig, Q, TOY_CURVE)
                assert recover_priv_from_nonce(sig, k, TOY_CURVE) == d


@settings(max_examples=5, deadline=None)
@given(st.integers(2, P256.n - 2), st.integers(1, P256.n - 1), st.integers(0, 2**256))
def test_p256_round_trip(d, k, h):
    sig = ecdsa_sign(h, d, k, P256)
    Q = public_key(d, P256)
    assert ecdsa_verify(sig, Q, P256)
    assert recover_priv_from_nonce(sig, k, P256) == d
    bad = Signature(sig.r, sig.s ^ 1, sig.h)
    assert not ecdsa_verify(bad, Q, P256)
    wrong_k = recover_priv_from_nonce(sig, k + 1 if k + 1 < P256.n else 1, P256)
    assert not ecdsa_verify(sig, public_key(wrong_k, P256), P256)


def test_verify_wrong_key_and_bad_inputs():
    rng = random.Random(3)
    d = rng.randrange(2, P256.n - 1)
    sig = ecdsa_sign(123, d, rng.randrange(1, P256.n), P256)
    other = public_key(rng.randrange(2, P256.n - 1), P256)
    assert not ecdsa_verify(sig, other, P256)
    assert not ecdsa_verify(sig, INFINITY, P256)
    assert not ecdsa_verify(Signature(0, sig.s, sig.h), public_key(d, P256), P256)


def test_toy_concrete_recovery():
    sig = Signature(r=10, s=14, h=10)
    assert recover_priv_from_nonce(sig, 3, TOY_CURVE) == 7


def test_curve_config_round_trip(tmp_path):
    text = format_curve_config(P256)
    assert parse_curve_config(text) == P256
    path = tmp_path / "c.txt"
    path.write_text("# comment\n" + text)
    assert load_curve(str(path)) == P256
    assert load_curve("toy17") is TOY_CURVE
    with pytest.raises(ValueError):
        parse_curve_config("p = 17\n")


def test_curve_rejects_bad_base_point():
    with pytest.raises(PointNotOnCurve):
        CurveParams(p=17, a=2, b=2, G=Point(1, 1), n=19)
