"""Masked scalar schedules (CM0-CM3) and the affine-masked AES S-box target.

The integers produced here are both what the simulated device leaks and what
the network is trained to predict. Byte views are big-endian: byte 0 is the
most significant byte.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from forge.errors import InvalidMask, ZeroMask

SCHEMES = ("cm0", "cm1", "cm2", "cm3")

# Attack points stored for each scheme, in manifest order.
SCHEME_VALUES = {
    "cm0": ("k",),
    "cm1": ("k", "r", "km"),
    "cm2": ("k", "r", "km", "rem"),
    "cm3": ("k", "r1", "r2", "r3", "km1", "km2", "rem2", "km3", "rem3"),
}


def random_scalar(bits: int, rng: np.random.Generator) -> int:
    """Integer in [0, 2**bits) with independent uniform bits."""
    if bits <= 0:
        raise ValueError("bits must be positive")
    nbytes = (bits + 7) // 8
    raw = rng.integers(0, 256, size=nbytes, dtype=np.uint8).tobytes()
    return int.from_bytes(raw, "big") & ((1 << bits) - 1)


def to_bytes(value: int, length: int) -> bytes:
    return value.to_bytes(length, "big")


def from_bytes(view) -> int:
    return int.from_bytes(bytes(view), "big")


def _is_probable_prime(n: int) -> bool:
    if n < 2:
        return False
    small = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37)
    for p in small:
        if n % p == 0:
            return n == p
    d, s = n - 1, 0
    while d % 2 == 0:
        d //= 2
        s += 1
    for a in small:
        x = pow(a, d, n)
        if x in (1, n - 1):
            continue
        for _ in range(s - 1):
            x = x * x % n
            if x == n - 1:
                break
        else:
            return False
    return True


def desk_modulus(scalar_bytes: int, kind: str = "pow2") -> int:
    """Modulus for the additive masks at a given scalar width.

    ``pow2`` gives 2**(8*scalar_bytes) (arithmetic masking, no borrow out of
    the top byte); ``prime`` gives the largest prime below that.
    """
    top = 1 << (8 * scalar_bytes)
    if kind == "pow2":
        return top
    if kind == "prime":
        n = top - 1
        while not _is_probable_prime(n):
            n -= 2
        return n
    raise ValueError(f"unknown modulus kind {kind!r}")


@dataclass
class EccMaskTrace:
    scheme: str
    k: int
    masks: dict[str, int]
    intermediates: dict[str, int]
    byte_len: int

    @property
    def byte_views(self) -> dict[str, bytes]:
        return {name: to_bytes(v, self.byte_len) for name, v in self.intermediates.items()}


def _width(n: int) -> int:
    # bytes needed for residues mod n
    return ((n - 1).bit_length() + 7) // 8


def cm0_schedule(k: int, byte_len: int) -> EccMaskTrace:
    return EccMaskTrace("cm0", k, {}, {"k": k}, byte_len)


def cm1_schedule(k: int, r: int, n: int, byte_len: int | None = None) -> EccMaskTrace:
    km = (k - r) % n
    return EccMaskTrace("cm1", k, {"r": r}, {"k": k, "r": r, "km": km},
                        byte_len or _width(n))


def cm2_schedule(k: int, r: int, byte_len: int) -> EccMaskTrace:
    if r == 0:
        raise ZeroMask("multiplicative mask must be non-zero")
    km, rem = divmod(k, r)
    return EccMaskTrace("cm2", k, {"r": r}, {"k": k, "r": r, "km": km, "rem": rem}, byte_len)


def cm3_schedule(k: int, r1: int, r2: int, r3: int, n: int,
                 byte_len: int | None = None) -> EccMaskTrace:
    if r2 == 0 or r3 == 0:
        raise ZeroMask("r2 and r3 must be non-zero")
    km1 = (k - r1) % n
    km2, rem2 = divmod(km1, r2)
    km3, rem3 = divmod(r1, r3)
    inter = {"k": k, "r1": r1, "r2": r2, "r3": r3, "km1": km1,
             "km2": km2, "rem2": rem2, "km3": km3, "rem3": rem3}
    return EccMaskTrace("cm3", k, {"r1": r1, "r2": r2, "r3": r3}, inter,
                        byte_len or _width(n))


def _nonzero_scalar(bits: int, rng: np.random.Generator) -> int:
    while True:
        v = random_scalar(bits, rng)
        if v:
            return v


def sample_ecc(scheme: str, scalar_bytes: int, n: int, rng: np.random.Generator) -> EccMaskTrace:
    """Draw a secret scalar and the scheme's masks, then run the schedule.

    Full-width masks use 8*scalar_bytes bits, multiplicative masks half of
    that. A zero multiplicative mask is redrawn.
    """
    full = 8 * scalar_bytes
    half = full // 2
    while True:
        k = random_scalar(full, rng)
        if k < n:
            break
    if scheme == "cm0":
        return cm0_schedule(k, scalar_bytes)
    if scheme == "cm1":
        return cm1_schedule(k, random_scalar(full, rng), n, scalar_bytes)
    if scheme == "cm2":
        return cm2_schedule(k, _nonzero_scalar(half, rng), scalar_bytes)
    if scheme == "cm3":
        r1 = random_scalar(full, rng)
        return cm3_schedule(k, r1, _nonzero_scalar(half, rng), _nonzero_scalar(half, rng),
                            n, scalar_bytes)
    raise ValueError(f"unknown scheme {scheme!r}")


# --- GF(2^8) and the AES S-box ---------------------------------------------

def gf256_mul(a: int, b: int) -> int:
    """Product in GF(2^8) modulo x^8 + x^4 + x^3 + x + 1."""
    out = 0
    a &= 0xFF
    b &= 0xFF
    while b:
        if b & 1:
            out ^= a
        a <<= 1
        if a & 0x100:
            a ^= 0x11B
        b >>= 1
    return out


def _build_tables():
    mul = np.zeros((256, 256), dtype=np.uint8)
    for a in range(256):
        for b in range(a, 256):
            mul[a, b] = mul[b, a] = gf256_mul(a, b)
    inv = np.zeros(256, dtype=np.uint8)
    for a in range(1, 256):
        # a^254 = a^-1
        acc, base, e = 1, a, 254
        while e:
            if e & 1:
                acc = int(mul[acc, base])
            base = int(mul[base, base])
            e >>= 1
        inv[a] = acc
    sbox = np.zeros(256, dtype=np.uint8)
    for x in range(256):
        b = int(inv[x])
        s = b
        for shift in range(1, 5):
            s ^= ((b << shift) | (b >> (8 - shift))) & 0xFF
        sbox[x] = s ^ 0x63
    inv_sbox = np.zeros(256, dtype=np.uint8)
    inv_sbox[sbox] = np.arange(256, dtype=np.uint8)
    return mul, inv, sbox, inv_sbox


GF_MUL, GF_INV, SBOX, INV_SBOX = _build_tables()


def gf256_inv(a: int) -> int:
    if a == 0:
        raise InvalidMask("0 has no inverse in GF(2^8)")
    return int(GF_INV[a])


def aes_sbox(x: int) -> int:
    return int(SBOX[x & 0xFF])


def aes_inv_sbox(x: int) -> int:
    return int(INV_SBOX[x & 0xFF])


@dataclass
class AesMaskState:
    key: np.ndarray
    pt: np.ndarray
    r_m: int
    r_out: int
    perm: np.ndarray
    c: np.ndarray = field(default_factory=lambda: np.zeros(16, dtype=np.uint8))


def ascadv2_intermediates(state: AesMaskState) -> np.ndarray:
    """c[i] = r_m * Sbox[pt[p[i]] ^ k[p[i]]] ^ r_out, written into ``state.c``."""
    if state.r_m == 0:
        raise InvalidMask("r_m must be non-zero")
    p = np.asarray(state.perm, dtype=np.intp)
    if sorted(p.tolist()) != list(range(16)):
        raise ValueError("perm must be a permutation of 0..15")
    x = np.asarray(state.pt, dtype=np.uint8)[p] ^ np.asarray(state.key, dtype=np.uint8)[p]
    state.c = GF_MUL[state.r_m, SBOX[x]] ^ np.uint8(state.r_out)
    return state.c


def fisher_yates(n: int, rng: np.random.Generator) -> np.ndarray:
    perm = np.arange(n)
    for i in range(n - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        perm[i], perm[j] = perm[j], perm[i]
    return perm


def sample_aes(rng: np.random.Generator, shuffle: bool = True) -> AesMaskState:
    key = rng.integers(0, 256, 16, dtype=np.uint8)
    pt = rng.integers(0, 256, 16, dtype=np.uint8)
    r_m = int(rng.integers(1, 256))
    r_out = int(rng.integers(0, 256))
    perm = fisher_yates(16, rng) if shuffle else np.arange(16)
    state = AesMaskState(key, pt, r_m, r_out, perm)
    ascadv2_intermediates(state)
    return state
