"""Prime-field short-Weierstrass curves and ECDSA.

Arithmetic is plain affine double-and-add over Python integers. Nothing here
tries to be constant time: leakage is simulated explicitly elsewhere.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import gcd
from pathlib import Path
from typing import Union

from forge.errors import DegenerateNonce, NonInvertible, PointNotOnCurve


class _Infinity:
    """The group identity. Use the module-level ``INFINITY`` singleton."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "INFINITY"

    def __reduce__(self):
        return (_Infinity, ())


INFINITY = _Infinity()


@dataclass(frozen=True)
class Point:
    x: int
    y: int


AnyPoint = Union[Point, _Infinity]


@dataclass(frozen=True)
class CurveParams:
    """y^2 = x^3 + a x + b over F_p with base point G of order n."""

    p: int
    a: int
    b: int
    G: Point
    n: int
    name: str = ""

    def __post_init__(self):
        if (4 * self.a**3 + 27 * self.b**2) % self.p == 0:
            raise ValueError(f"{self.name or 'curve'}: singular curve")
        if not self.contains(self.G):
            raise PointNotOnCurve(f"{self.name or 'curve'}: G is not on the curve")

    @property
    def byte_len(self) -> int:
        return (self.n.bit_length() + 7) // 8

    def contains(self, P: AnyPoint) -> bool:
        if P is INFINITY:
            return True
        return (P.y * P.y - (P.x**3 + self.a * P.x + self.b)) % self.p == 0


@dataclass(frozen=True)
class Signature:
    r: int
    s: int
    h: int


@dataclass(frozen=True)
class KeyPair:
    d: int
    Q: Point


TOY_CURVE = CurveParams(p=17, a=2, b=2, G=Point(5, 1), n=19, name="toy17")

P256 = CurveParams(
    p=0xFFFFFFFF00000001000000000000000000000000FFFFFFFFFFFFFFFFFFFFFFFF,
    a=0xFFFFFFFF00000001000000000000000000000000FFFFFFFFFFFFFFFFFFFFFFFC,
    b=0x5AC635D8AA3A93E7B3EBBD55769886BC651D06B0CC53B0F63BCE3C3E27D2604B,
    G=Point(
        0x6B17D1F2E12C4247F8BCE6E563A440F277037D812DEB33A0F4A13945D898C296,
        0x4FE342E2FE1A7F9B8EE7EB4A7C0F9E162BCE33576B315ECECBB6406837BF51F5,
    ),
    n=0xFFFFFFFF00000000FFFFFFFFFFFFFFFFBCE6FAADA7179E84F3B9CAC2FC632551,
    name="P-256",
)

BUILTIN_CURVES = {"toy17": TOY_CURVE, "p256": P256, "P-256": P256}


def mod_inv(x: int, m: int) -> int:
    if m < 2:
        raise ValueError("modulus must be >= 2")
    if gcd(x, m) != 1:
        raise NonInvertible(f"{x} has no inverse mod {m}")
    return pow(x, -1, m)


def point_neg(P: AnyPoint, curve: CurveParams) -> AnyPoint:
    if P is INFINITY:
        return P
    return Point(P.x, (-P.y) % curve.p)


def point_add(P: AnyPoint, Q: AnyPoint, curve: CurveParams) -> AnyPoint:
    if P is INFINITY:
        return Q
    if Q is INFINITY:
        return P
    p = curve.p
    if P.x == Q.x:
        if (P.y + Q.y) % p == 0:
            return INFINITY
        lam = (3 * P.x * P.x + curve.a) * pow(2 * P.y, -1, p) % p
    else:
        lam = (Q.y - P.y) * pow(Q.x - P.x, -1, p) % p
    x3 = (lam * lam - P.x - Q.x) % p
    return Point(x3, (lam * (P.x - x3) - P.y) % p)


def scalar_mul(k: int, P: AnyPoint, curve: CurveParams) -> AnyPoint:
    """Return k*P by left-to-right double-and-add."""
    if not curve.contains(P):
        raise PointNotOnCurve(f"{P} is not on {curve.name}")
    if k < 0:
        raise ValueError("scalar must be non-negative")
    R: AnyPoint = INFINITY
    for bit in bin(k)[2:] if k else "":
        R = point_add(R, R, curve)
        if bit == "1":
            R = point_add(R, P, curve)
    return R


def public_key(d: int, curve: CurveParams) -> Point:
    return scalar_mul(d, curve.G, curve)


def keypair(d: int, curve: CurveParams) -> KeyPair:
    if not 1 < d < curve.n - 1:
        raise ValueError("private key out of range")
    return KeyPair(d, public_key(d, curve))


def ecdsa_sign(h: int, d: int, k: int, curve: CurveParams) -> Signature:
    n = curve.n
    if not 1 <= k < n:
        raise ValueError("nonce out of range")
    R = scalar_mul(k, curve.G, curve)
    r = R.x % n
    if r == 0:
        raise DegenerateNonce("r = 0")
    h = h % n
    s = mod_inv(k, n) * (h + r * d) % n
    if s == 0:
        raise DegenerateNonce("s = 0")
    return Signature(r=r, s=s, h=h)


def ecdsa_verify(sig: Signature, Q: AnyPoint, curve: CurveParams) -> bool:
    n = curve.n
    if Q is INFINITY or not curve.contains(Q):
        return False
    if not (1 <= sig.r < n and 1 <= sig.s < n):
        return False
    try:
        w = mod_inv(sig.s, n)
    except NonInvertible:
        return False
    u1 = sig.h % n * w % n
    u2 = sig.r * w % n
    X = point_add(scalar_mul(u1, curve.G, curve), scalar_mul(u2, Q, curve), curve)
    if X is INFINITY:
        return False
    return X.x % n == sig.r


def recover_priv_from_nonce(sig: Signature, k: int, curve: CurveParams) -> int:
    """d = r^-1 (s k - h) mod n."""
    n = curve.n
    return mod_inv(sig.r, n) * (sig.s * k - sig.h) % n


def _parse_int(text: str) -> int:
    text = text.strip().replace("_", "")
    return int(text, 16) if text.lower().startswith("0x") else int(text, 10)


def parse_curve_config(text: str) -> CurveParams:
    """Parse ``key = value`` lines with keys p, a, b, gx, gy, n (and optional name).

    Values may be decimal or 0x-prefixed hex; ``#`` starts a comment.
    """
    fields: dict[str, str] = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        sep = "=" if "=" in line else ":"
        if sep not in line:
            raise ValueError(f"bad curve config line: {raw!r}")
        key, value = (part.strip() for part in line.split(sep, 1))
        fields[key.lower()] = value
    missing = [k for k in ("p", "a", "b", "gx", "gy", "n") if k not in fields]
    if missing:
        raise ValueError(f"curve config missing fields: {', '.join(missing)}")
    vals = {k: _parse_int(fields[k]) for k in ("p", "a", "b", "gx", "gy", "n")}
    return CurveParams(
        p=vals["p"], a=vals["a"] % vals["p"], b=vals["b"] % vals["p"],
        G=Point(vals["gx"], vals["gy"]), n=vals["n"],
        name=fields.get("name", "custom"),
    )


def load_curve(spec: str) -> CurveParams:
    """Resolve a built-in curve name or read a curve config file."""
    if spec in BUILTIN_CURVES:
        return BUILTIN_CURVES[spec]
    return parse_curve_config(Path(spec).read_text(encoding="utf-8"))


def format_curve_config(curve: CurveParams) -> str:
    return "\n".join([
        f"name = {curve.name}",
        f"p = {hex(curve.p)}",
        f"a = {hex(curve.a)}",
        f"b = {hex(curve.b)}",
        f"gx = {hex(curve.G.x)}",
        f"gy = {hex(curve.G.y)}",
        f"n = {hex(curve.n)}",
    ]) + "\n"
