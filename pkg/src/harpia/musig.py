"""MuSig key aggregation, three-round signing and m-of-n key enumeration.

Hash functions are SHA-256 with a one-byte domain prefix:
``H_com`` 0x01, ``H_agg`` 0x02, ``H_sig`` 0x03, ``H_tree`` 0x04.
Points are serialized compressed (33 bytes) everywhere and the key list
encoding is the concatenation of the sorted compressed keys.
"""

from __future__ import annotations

import enum
import hashlib
import itertools
import math
import secrets
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

from harpia.secp256k1 import (
    G,
    N,
    InvalidPointError,
    Point,
    base_mul,
    decode_point,
    encode_point,
    is_on_curve,
    multi_mul,
    point_sum,
    scalar_from_bytes,
    scalar_to_bytes,
)

TAG_COM = b"\x01"
TAG_AGG = b"\x02"
TAG_SIG = b"\x03"
TAG_TREE = b"\x04"

COMMITMENT_SIZE = 32
NONCE_SIZE = 33
PARTIAL_SIZE = 32
SIGNATURE_SIZE = 33 + 32

NonceSource = Callable[[], int]


class MuSigError(Exception):
    pass


class StageError(MuSigError):
    """A session method was called out of order."""


class MissingContributionError(MuSigError):
    def __init__(self, missing: Sequence[bytes], what: str):
        super().__init__(f"missing {what} from {len(missing)} cosigner(s)")
        self.missing = list(missing)
        self.what = what


class MuSigAbort(MuSigError):
    """A revealed nonce did not match its commitment."""

    def __init__(self, cosigner: bytes):
        super().__init__(f"nonce of cosigner {cosigner.hex()[:16]}... does not match commitment")
        self.cosigner = cosigner


def _scalar_hash(tag: bytes, data: bytes) -> int:
    return int.from_bytes(hashlib.sha256(tag + data).digest(), "big") % N


def h_com(nonce: Point) -> bytes:
    return hashlib.sha256(TAG_COM + encode_point(nonce)).digest()


def h_agg(key_list: "KeyList", key: bytes) -> int:
    return _scalar_hash(TAG_AGG, key_list.encoding + key)


def h_sig(aggkey: Point, nonce: Point, message: bytes) -> int:
    return _scalar_hash(TAG_SIG, encode_point(aggkey) + encode_point(nonce) + message)


def h_tree(data: bytes) -> bytes:
    return hashlib.sha256(TAG_TREE + data).digest()


def _random_scalar() -> int:
    return secrets.randbelow(N - 1) + 1


@dataclass(frozen=True)
class KeyPair:
    secret: int
    public: Point

    @classmethod
    def from_secret(cls, secret: int) -> "KeyPair":
        if not 1 <= secret < N:
            raise ValueError("secret scalar must lie in [1, N-1]")
        return cls(secret, base_mul(secret))

    @classmethod
    def generate(cls, nonce_source: Optional[NonceSource] = None) -> "KeyPair":
        return cls.from_secret((nonce_source or _random_scalar)())

    @property
    def encoded(self) -> bytes:
        return encode_point(self.public)


def _as_encoded(key: Union[bytes, Point, KeyPair]) -> bytes:
    if isinstance(key, KeyPair):
        return key.encoded
    if isinstance(key, (bytes, bytearray)):
        data = bytes(key)
        decode_point(data)
        return data
    if not is_on_curve(key):
        raise InvalidPointError("public key is not a valid curve point")
    return encode_point(key)


class KeyList:
    """Canonically sorted list of distinct compressed public keys."""

    __slots__ = ("keys", "_points")

    def __init__(self, keys: Iterable[Union[bytes, Point, KeyPair]]):
        encoded = sorted(_as_encoded(k) for k in keys)
        if not encoded:
            raise ValueError("key list must not be empty")
        if len(set(encoded)) != len(encoded):
            raise ValueError("key list contains a duplicate key")
        self.keys: Tuple[bytes, ...] = tuple(encoded)
        self._points: Optional[Tuple[Point, ...]] = None

    @property
    def encoding(self) -> bytes:
        return b"".join(self.keys)

    @property
    def points(self) -> Tuple[Point, ...]:
        if self._points is None:
            self._points = tuple(decode_point(k) for k in self.keys)
        return self._points

    def subset(self, indices: Iterable[int]) -> "KeyList":
        return KeyList(self.keys[i] for i in indices)

    def __len__(self) -> int:
        return len(self.keys)

    def __iter__(self) -> Iterator[bytes]:
        return iter(self.keys)

    def __contains__(self, key: object) -> bool:
        return key in self.keys

    def __eq__(self, other: object) -> bool:
        return isinstance(other, KeyList) and self.keys == other.keys

    def __hash__(self) -> int:
        return hash(self.keys)

    def __repr__(self) -> str:
        return f"KeyList(n={len(self.keys)})"


@dataclass(frozen=True)
class AggregatedKey:
    point: Point
    source: KeyList
    coefficients: Tuple[int, ...] = field(repr=False, compare=False)

    @property
    def encoded(self) -> bytes:
        return encode_point(self.point)

    def coefficient(self, key: bytes) -> int:
        return self.coefficients[self.source.keys.index(key)]


def aggregate_key(keys: Union[KeyList, Iterable[Union[bytes, Point, KeyPair]]]) -> AggregatedKey:
    """Compute the aggregated key as the product of X_i^{a_i}."""
    key_list = keys if isinstance(keys, KeyList) else KeyList(keys)
    coefficients = tuple(h_agg(key_list, k) for k in key_list.keys)
    point = multi_mul(list(zip(coefficients, key_list.points)))
    if point is None:
        raise InvalidPointError("aggregated key is the point at infinity")
    return AggregatedKey(point, key_list, coefficients)


@dataclass(frozen=True)
class MultiSignature:
    nonce_point: Point
    scalar_sum: int

    def to_bytes(self) -> bytes:
        return encode_point(self.nonce_point) + scalar_to_bytes(self.scalar_sum)

    @classmethod
    def from_bytes(cls, data: bytes) -> "MultiSignature":
        if len(data) != SIGNATURE_SIZE:
            raise ValueError("multi-signature must be 65 bytes")
        return cls(decode_point(data[:33]), scalar_from_bytes(data[33:]))


def verify(message: bytes, aggkey: Union[AggregatedKey, Point, bytes], sig: MultiSignature) -> bool:
    """Accept iff g^s = R * X~^c with c = H_sig(X~, R, m)."""
    try:
        if isinstance(aggkey, AggregatedKey):
            point = aggkey.point
        elif isinstance(aggkey, (bytes, bytearray)):
            point = decode_point(bytes(aggkey))
        else:
            point = aggkey
        if not (is_on_curve(point) and is_on_curve(sig.nonce_point)):
            return False
        if not 0 <= sig.scalar_sum < N:
            return False
        c = h_sig(point, sig.nonce_point, message)
    except (InvalidPointError, ValueError, TypeError):
        return False
    # g^s * X~^{-c} must equal R
    return multi_mul([(sig.scalar_sum, G), (N - c, point)]) == sig.nonce_point


class Stage(enum.Enum):
    FRESH = "fresh"
    COMMITTED = "committed"
    REVEALED = "revealed"
    PARTIALLY_SIGNED = "partially_signed"
    COMPLETE = "complete"
    ABORTED = "aborted"


class MuSigSession:
    """One signer's view of a three-round MuSig run.

    Contributions from cosigners are passed as mappings keyed by the
    cosigner's compressed public key. The signer's own entry may be
    included or left out.
    """

    def __init__(
        self,
        message: bytes,
        cosigners: Union[KeyList, Iterable[Union[bytes, Point, KeyPair]]],
        own_key: KeyPair,
        *,
        aggkey: Optional[AggregatedKey] = None,
        nonce_source: Optional[NonceSource] = None,
    ):
        self.message = bytes(message)
        self.cosigners = cosigners if isinstance(cosigners, KeyList) else KeyList(cosigners)
        self.own_key = own_key
        self.own_id = own_key.encoded
        if self.own_id not in self.cosigners:
            raise ValueError("own key is not among the cosigners")
        if aggkey is not None and aggkey.source != self.cosigners:
            raise ValueError("aggregated key was built from a different key list")
        self.aggkey = aggkey or aggregate_key(self.cosigners)
        self._nonce_source = nonce_source or _random_scalar
        self.stage = Stage.FRESH
        self.own_nonce: Optional[int] = None
        self.own_public_nonce: Optional[Point] = None
        self.commitments: Dict[bytes, bytes] = {}
        self.nonces: Dict[bytes, Point] = {}
        self.partials: Dict[bytes, int] = {}
        self.nonce_point: Optional[Point] = None
        self.challenge: Optional[int] = None

    def _expect(self, stage: Stage) -> None:
        if self.stage is not stage:
            raise StageError(f"session is {self.stage.value}, expected {stage.value}")

    def _others(self) -> List[bytes]:
        return [k for k in self.cosigners.keys if k != self.own_id]

    def _gather(self, received: Mapping[bytes, object], what: str) -> None:
        missing = [k for k in self._others() if k not in received]
        if missing:
            raise MissingContributionError(missing, what)
        unknown = [k for k in received if k not in self.cosigners]
        if unknown:
            raise MuSigError(f"{what} from a key outside the cosigner list")

    def commit(self) -> bytes:
        """Round 2a: draw r_1, publish t_1 = H_com(g^{r_1})."""
        self._expect(Stage.FRESH)
        r = self._nonce_source() % N
        if r == 0:
            raise MuSigError("nonce source returned zero")
        self.own_nonce = r
        self.own_public_nonce = base_mul(r)
        t = h_com(self.own_public_nonce)
        self.commitments[self.own_id] = t
        self.stage = Stage.COMMITTED
        return t

    def reveal(self, commitments: Mapping[bytes, bytes]) -> Point:
        """Round 2b: release R_1 once every cosigner's commitment is in."""
        self._expect(Stage.COMMITTED)
        self._gather(commitments, "commitment")
        own = commitments.get(self.own_id)
        if own is not None and own != self.commitments[self.own_id]:
            raise MuSigError("commitment recorded for own key does not match")
        for k in self._others():
            t = commitments[k]
            if len(t) != COMMITMENT_SIZE:
                raise MuSigError("commitment must be 32 bytes")
            self.commitments[k] = bytes(t)
        self.stage = Stage.REVEALED
        assert self.own_public_nonce is not None
        return self.own_public_nonce

    def partial_sign(self, nonces: Mapping[bytes, Union[Point, bytes]]) -> int:
        """Round 3: check every R_i against t_i, then s_1 = r_1 + c a_1 x_1."""
        self._expect(Stage.REVEALED)
        self._gather(nonces, "nonce")
        collected: Dict[bytes, Point] = {self.own_id: self.own_public_nonce}  # type: ignore[dict-item]
        for k in self._others():
            value = nonces[k]
            try:
                point = decode_point(value) if isinstance(value, (bytes, bytearray)) else value
                ok = is_on_curve(point) and h_com(point) == self.commitments[k]
            except InvalidPointError:
                ok = False
            if not ok:
                self.stage = Stage.ABORTED
                self.own_nonce = None
                raise MuSigAbort(k)
            collected[k] = point
        self.nonces = collected
        nonce_point = point_sum(collected.values())
        if nonce_point is None:
            self.stage = Stage.ABORTED
            raise MuSigError("aggregate nonce is the point at infinity")
        self.nonce_point = nonce_point
        self.challenge = h_sig(self.aggkey.point, nonce_point, self.message)
        a = self.aggkey.coefficient(self.own_id)
        assert self.own_nonce is not None
        s = (self.own_nonce + self.challenge * a * self.own_key.secret) % N
        self.own_nonce = None
        self.partials[self.own_id] = s
        self.stage = Stage.PARTIALLY_SIGNED
        return s

    def combine(self, partials: Mapping[bytes, int]) -> MultiSignature:
        """Sum all partial signatures into sigma = (R, s)."""
        self._expect(Stage.PARTIALLY_SIGNED)
        self._gather(partials, "partial signature")
        for k in self._others():
            self.partials[k] = partials[k] % N
        total = sum(self.partials.values()) % N
        assert self.nonce_point is not None
        self.stage = Stage.COMPLETE
        return MultiSignature(self.nonce_point, total)


def run_session(
    message: bytes,
    signers: Sequence[KeyPair],
    *,
    aggkey: Optional[AggregatedKey] = None,
    nonce_source: Optional[NonceSource] = None,
) -> Tuple[MultiSignature, AggregatedKey]:
    """Drive a full honest run among ``signers`` and return (sigma, X~)."""
    cosigners = KeyList(signers)
    aggkey = aggkey or aggregate_key(cosigners)
    sessions = [
        MuSigSession(message, cosigners, kp, aggkey=aggkey, nonce_source=nonce_source) for kp in signers
    ]
    commitments = {s.own_id: s.commit() for s in sessions}
    nonces = {s.own_id: s.reveal(commitments) for s in sessions}
    partials = {s.own_id: s.partial_sign(nonces) for s in sessions}
    sigs = [s.combine(partials) for s in sessions]
    assert all(sig == sigs[0] for sig in sigs)
    return sigs[0], aggkey


def threshold_m(n: int, zeta: Union[int, float, str, Fraction]) -> int:
    """Smallest m with 100 m / n >= zeta."""
    z = Fraction(str(zeta)) if not isinstance(zeta, Fraction) else zeta
    if not (50 <= z < 100):
        raise ValueError("zeta must lie in [50, 100)")
    if n < 1:
        raise ValueError("need at least one member")
    return max(1, math.ceil(z * n / 100))


def threshold_subsets(n: int, zeta: Union[int, float, str, Fraction]) -> Iterator[Tuple[int, ...]]:
    """Index subsets of size m..n; by size, lexicographic within a size."""
    m = threshold_m(n, zeta)
    for k in range(m, n + 1):
        yield from itertools.combinations(range(n), k)


def threshold_combinations(members: KeyList, zeta: Union[int, float, str, Fraction]) -> List[AggregatedKey]:
    return [aggregate_key(members.subset(idx)) for idx in threshold_subsets(len(members), zeta)]
