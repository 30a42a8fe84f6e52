"""Arithmetic on the secp256k1 curve y^2 = x^3 + 7 over GF(P).

Points are affine ``(x, y)`` tuples and the point at infinity is ``None``.
Internally scalar multiplication runs in Jacobian coordinates; only the
final result is converted back to affine.

Not constant time. Fine for a protocol engine and simulator, not for
guarding real funds.
"""

from __future__ import annotations

from typing import Iterable, Optional, Sequence, Tuple

P = 0xFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFEFFFFFC2F
N = 0xFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFEBAAEDCE6AF48A03BBFD25E8CD0364141
G = (
    0x79BE667EF9DCBBAC55A06295CE870B07029BFCDB2DCE28D959F2815B16F81798,
    0x483ADA7726A3C4655DA4FBFC0E1108A8FD17B448A68554199C47D08FFB10D4B8,
)

Point = Tuple[int, int]
_Jacobian = Tuple[int, int, int]

_JINF: _Jacobian = (0, 1, 0)


class InvalidPointError(ValueError):
    pass


def is_on_curve(pt: Optional[Point]) -> bool:
    if pt is None:
        return False
    x, y = pt
    if not (0 <= x < P and 0 <= y < P):
        return False
    return (y * y - x * x * x - 7) % P == 0


def _jdouble(p: _Jacobian) -> _Jacobian:
    x, y, z = p
    if z == 0 or y == 0:
        return _JINF
    yy = y * y % P
    s = 4 * x * yy % P
    m = 3 * x * x % P
    x3 = (m * m - 2 * s) % P
    y3 = (m * (s - x3) - 8 * yy * yy) % P
    z3 = 2 * y * z % P
    return x3, y3, z3


def _jadd_affine(p: _Jacobian, q: Point) -> _Jacobian:
    # mixed addition: q has implicit z = 1
    x1, y1, z1 = p
    x2, y2 = q
    if z1 == 0:
        return x2, y2, 1
    z1z1 = z1 * z1 % P
    u2 = x2 * z1z1 % P
    s2 = y2 * z1 * z1z1 % P
    h = (u2 - x1) % P
    r = (s2 - y1) % P
    if h == 0:
        if r == 0:
            return _jdouble(p)
        return _JINF
    hh = h * h % P
    hhh = h * hh % P
    v = x1 * hh % P
    x3 = (r * r - hhh - 2 * v) % P
    y3 = (r * (v - x3) - y1 * hhh) % P
    z3 = z1 * h % P
    return x3, y3, z3


def _to_affine(p: _Jacobian) -> Optional[Point]:
    x, y, z = p
    if z == 0:
        return None
    zi = pow(z, -1, P)
    zi2 = zi * zi % P
    return x * zi2 % P, y * zi2 * zi % P


def point_add(p1: Optional[Point], p2: Optional[Point]) -> Optional[Point]:
    if p1 is None:
        return p2
    if p2 is None:
        return p1
    return _to_affine(_jadd_affine((p1[0], p1[1], 1), p2))


def point_neg(pt: Optional[Point]) -> Optional[Point]:
    if pt is None:
        return None
    return pt[0], (-pt[1]) % P


def point_mul(pt: Optional[Point], k: int) -> Optional[Point]:
    """Return ``k * pt`` (``pt^k`` in multiplicative notation)."""
    k %= N
    if pt is None or k == 0:
        return None
    acc = _JINF
    for bit in bin(k)[2:]:
        acc = _jdouble(acc)
        if bit == "1":
            acc = _jadd_affine(acc, pt)
    return _to_affine(acc)


def multi_mul(terms: Sequence[Tuple[int, Optional[Point]]]) -> Optional[Point]:
    """Return ``sum(k_i * P_i)`` sharing one doubling chain (Straus)."""
    live = [(k % N, pt) for k, pt in terms if pt is not None and k % N]
    if not live:
        return None
    width = max(k.bit_length() for k, _ in live)
    acc = _JINF
    for i in range(width - 1, -1, -1):
        acc = _jdouble(acc)
        for k, pt in live:
            if (k >> i) & 1:
                acc = _jadd_affine(acc, pt)
    return _to_affine(acc)


def point_sum(points: Iterable[Optional[Point]]) -> Optional[Point]:
    acc = _JINF
    for pt in points:
        if pt is not None:
            acc = _jadd_affine(acc, pt)
    return _to_affine(acc)


# Fixed-base table: _G_TABLE[i] = 2^i * G. Turns g^k into additions only.
def _build_g_table() -> list:
    table = []
    cur: Optional[Point] = G
    for _ in range(256):
        table.append(cur)
        cur = point_add(cur, cur)
    return table


_G_TABLE = _build_g_table()


def base_mul(k: int) -> Optional[Point]:
    """Return ``k * G`` using the precomputed doubling table."""
    k %= N
    acc = _JINF
    i = 0
    while k:
        if k & 1:
            acc = _jadd_affine(acc, _G_TABLE[i])
        k >>= 1
        i += 1
    return _to_affine(acc)


def encode_point(pt: Optional[Point]) -> bytes:
    """33-byte compressed SEC encoding."""
    if pt is None:
        raise InvalidPointError("cannot encode the point at infinity")
    x, y = pt
    return (b"\x03" if y & 1 else b"\x02") + x.to_bytes(32, "big")


def decode_point(data: bytes) -> Point:
    if len(data) != 33 or data[0] not in (2, 3):
        raise InvalidPointError("expected a 33-byte compressed point")
    x = int.from_bytes(data[1:], "big")
    if x >= P:
        raise InvalidPointError("x coordinate out of range")
    y_sq = (pow(x, 3, P) + 7) % P
    y = pow(y_sq, (P + 1) // 4, P)
    if y * y % P != y_sq:
        raise InvalidPointError("x coordinate is not on the curve")
    if (y & 1) != (data[0] & 1):
        y = P - y
    return x, y


def scalar_to_bytes(k: int) -> bytes:
    return (k % N).to_bytes(32, "big")


def scalar_from_bytes(data: bytes) -> int:
    if len(data) != 32:
        raise ValueError("expected a 32-byte scalar")
    return int.from_bytes(data, "big")
