"""ECDSA over secp256k1 for DPIFA reports, STPs and acknowledgements.

Signatures are deterministic (RFC 6979) and travel as 64 bytes ``r || s``.
The same secret scalar backs a router's ECDSA key and its MuSig key.
"""

from __future__ import annotations

import hashlib
from functools import lru_cache

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.hazmat.primitives.asymmetric.utils import (
    decode_dss_signature,
    encode_dss_signature,
)

from harpia.secp256k1 import N, Point, encode_point

SIGNATURE_SIZE = 64
ADDRESS_SIZE = 20

_CURVE = ec.SECP256K1()
_ALGORITHM = ec.ECDSA(hashes.SHA256(), deterministic_signing=True)


class Signer:
    """Holds an ECDSA private key derived from a secp256k1 scalar."""

    def __init__(self, secret: int):
        if not 1 <= secret < N:
            raise ValueError("secret scalar out of range")
        self._key = ec.derive_private_key(secret, _CURVE)
        numbers = self._key.public_key().public_numbers()
        self.public: Point = (numbers.x, numbers.y)

    def sign(self, message: bytes) -> bytes:
        der = self._key.sign(message, _ALGORITHM)
        r, s = decode_dss_signature(der)
        return r.to_bytes(32, "big") + s.to_bytes(32, "big")


@lru_cache(maxsize=4096)
def _public_key(point: Point) -> ec.EllipticCurvePublicKey:
    return ec.EllipticCurvePublicNumbers(point[0], point[1], _CURVE).public_key()


def verify(public: Point, message: bytes, signature: bytes) -> bool:
    if len(signature) != SIGNATURE_SIZE:
        return False
    r = int.from_bytes(signature[:32], "big")
    s = int.from_bytes(signature[32:], "big")
    if not (0 < r < N and 0 < s < N):
        return False
    try:
        _public_key(public).verify(encode_dss_signature(r, s), message, _ALGORITHM)
    except (InvalidSignature, ValueError):
        return False
    return True


def address_of(public: Point) -> bytes:
    """20-byte member address: tail of SHA-256 over the compressed key."""
    return hashlib.sha256(encode_point(public)).digest()[-ADDRESS_SIZE:]
