"""Settlement transaction proposals (STPs): entries, wire format, validation.

Balances are integer token subunits (``TOKEN`` per token) and prices are
subunits per GB (10^9 bytes). For router n with neighbors A_n::

    C_n = sum_a F[n,a] * P[n,a] - S[n,a] * P_avg * H_avg

where F[n,a] = I[n,a] - T[n,a] is what n forwarded for a, all in bytes.
Entries are computed as exact fractions and truncated toward zero.
"""

from __future__ import annotations

import hashlib
import struct
from collections import deque
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Collection, Dict, Iterable, List, Mapping, Optional, Tuple, Union

from harpia import signing
from harpia.dpifa import AggregatedCounters, check_conservation, conservation_auditable
from harpia.musig import threshold_m
from harpia.secp256k1 import Point

TOKEN = 10**9
GB = 10**9

Link = Tuple[int, int]
Topology = Mapping[int, Iterable[int]]


class SettlementError(ValueError):
    pass


class MissingPriceError(SettlementError):
    pass


class DisconnectedTopologyError(SettlementError):
    pass


class PriceView:
    """Directed link prices; a link is usable only when both sides agree."""

    def __init__(self, prices: Mapping[Link, int]):
        self.prices: Dict[Link, int] = dict(prices)

    def is_symmetric(self, n: int, m: int) -> bool:
        p = self.prices.get((n, m))
        return p is not None and p == self.prices.get((m, n))

    def price(self, n: int, m: int) -> int:
        if not self.is_symmetric(n, m):
            raise MissingPriceError(f"link ({n}, {m}) has no agreed price")
        return self.prices[(n, m)]

    def links(self) -> List[Link]:
        return sorted({(min(n, m), max(n, m)) for n, m in self.prices if self.is_symmetric(n, m)})


def forwarded_bytes(agg: AggregatedCounters, n: int, a: int) -> int:
    c = agg.get(n, a)
    return c.input.bytes - c.terminated.bytes


def avg_hop_count(topology: Topology, members: Optional[Iterable[int]] = None) -> Fraction:
    """Mean BFS distance over all unordered member pairs."""
    nodes = sorted(members if members is not None else topology)
    total = 0
    for i, src in enumerate(nodes):
        dist = {src: 0}
        queue = deque([src])
        while queue:
            u = queue.popleft()
            for v in topology.get(u, ()):
                if v not in dist:
                    dist[v] = dist[u] + 1
                    queue.append(v)
        for dst in nodes[i + 1 :]:
            if dst not in dist:
                raise DisconnectedTopologyError(f"no path between {src} and {dst}")
            total += dist[dst]
    pairs = len(nodes) * (len(nodes) - 1) // 2
    return Fraction(total, pairs) if pairs else Fraction(0)


def avg_price(prices: PriceView) -> Fraction:
    links = prices.links()
    if not links:
        return Fraction(0)
    return Fraction(sum(prices.price(n, m) for n, m in links), len(links))


def exact_entries(
    agg: AggregatedCounters,
    prices: PriceView,
    topology: Topology,
    members: Iterable[int],
    *,
    audited: bool = True,
) -> Dict[int, Fraction]:
    """C_n as exact fractions of a subunit.

    With ``audited`` set, each term is taken from the side of a link that
    was not contradicted: forwarding credit is capped by what the upstream
    neighbor says it sent (and zeroed if n fails flow conservation), and the
    origin charge uses the larger of n's own S and the neighbor's OFN. On
    reports that pass every check this is the plain formula.
    """
    members = sorted(members)
    p_avg = avg_price(prices)
    h_avg = avg_hop_count(topology, members)
    unit_charge = p_avg * h_avg
    entries: Dict[int, Fraction] = {}
    for n in members:
        credit = Fraction(0)
        charge = Fraction(0)
        conserving = not audited or not conservation_auditable(agg, n) or check_conservation(agg, n)
        for a in agg.neighbors(n):
            if a not in topology.get(n, ()) or a not in members:
                continue
            mine, theirs = agg.get(n, a), agg.get(a, n)
            if not any(mine.as_tuple()) and not any(theirs.as_tuple()):
                continue
            price = prices.price(n, a)  # any traffic on the link requires an agreed price
            if audited:
                f = max(0, min(mine.input.bytes, theirs.output.bytes) - mine.terminated.bytes) if conserving else 0
                s = max(mine.started.bytes, theirs.ofn.bytes)
            else:
                f = mine.input.bytes - mine.terminated.bytes
                s = mine.started.bytes
            if f:
                credit += Fraction(f * price, GB)
            if s:
                charge += s * unit_charge / GB
        entries[n] = credit - charge
    return entries


def compute_entries(
    agg: AggregatedCounters,
    prices: PriceView,
    topology: Topology,
    members: Iterable[int],
    *,
    audited: bool = True,
) -> Dict[int, int]:
    return {n: int(c) for n, c in exact_entries(agg, prices, topology, members, audited=audited).items()}


STP_HEADER = ">II32s32sQIII"  # proposer, cycle, anchor, next_root, reward, timestamp, nonce, count
STP_HEADER_SIZE = struct.calcsize(STP_HEADER)
STP_ENTRY = ">Iq"
STP_ENTRY_SIZE = struct.calcsize(STP_ENTRY)


def stp_size(entries: int) -> int:
    return STP_HEADER_SIZE + STP_ENTRY_SIZE * entries + signing.SIGNATURE_SIZE


@dataclass(frozen=True)
class Stp:
    proposer: int
    cycle_id: int
    anchor: bytes
    next_root: bytes
    reward: int
    timestamp: int
    nonce: int
    entries: Tuple[Tuple[int, int], ...]  # (rid, C_n) sorted by rid
    signature: bytes = b""

    @property
    def entry_map(self) -> Dict[int, int]:
        return dict(self.entries)

    def body(self) -> bytes:
        head = struct.pack(
            STP_HEADER, self.proposer, self.cycle_id, self.anchor, self.next_root,
            self.reward, self.timestamp, self.nonce, len(self.entries),
        )
        return head + b"".join(struct.pack(STP_ENTRY, rid, c) for rid, c in self.entries)

    def to_bytes(self) -> bytes:
        """Canonical encoding; this is also the MuSig message for Settle."""
        return self.body() + self.signature

    def digest(self) -> bytes:
        return hashlib.sha256(self.to_bytes()).digest()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Stp":
        if len(data) < STP_HEADER_SIZE:
            raise ValueError("truncated STP")
        proposer, cycle, anchor, root, reward, ts, nonce, count = struct.unpack_from(STP_HEADER, data)
        if len(data) != stp_size(count):
            raise ValueError("STP length does not match its entry count")
        entries = tuple(
            struct.unpack_from(STP_ENTRY, data, STP_HEADER_SIZE + i * STP_ENTRY_SIZE) for i in range(count)
        )
        return cls(proposer, cycle, anchor, root, reward, ts, nonce, entries, data[-signing.SIGNATURE_SIZE :])


def sign_stp(
    signer: signing.Signer,
    proposer: int,
    cycle_id: int,
    anchor: bytes,
    next_root: bytes,
    entries: Mapping[int, int],
    reward: int,
    timestamp: int,
    nonce: int,
) -> Stp:
    unsigned = Stp(proposer, cycle_id, anchor, next_root, reward, timestamp, nonce, tuple(sorted(entries.items())))
    return replace(unsigned, signature=signer.sign(unsigned.body()))


def build_stp(
    signer: signing.Signer,
    proposer: int,
    cycle_id: int,
    agg: AggregatedCounters,
    prices: PriceView,
    topology: Topology,
    members: Iterable[int],
    *,
    reward: int,
    anchor: bytes,
    next_root: bytes,
    timestamp: int,
    nonce: int,
) -> Stp:
    entries = compute_entries(agg, prices, topology, members)
    return sign_stp(signer, proposer, cycle_id, anchor, next_root, entries, reward, timestamp, nonce)


@dataclass(frozen=True)
class Verdict:
    ok: bool
    reason: str = ""
    router: Optional[int] = None

    def __bool__(self) -> bool:
        return self.ok


def within_tolerance(proposed: int, local: int, delta: Union[int, float, str, Fraction]) -> bool:
    d = Fraction(str(delta)) if not isinstance(delta, Fraction) else delta
    return abs(proposed - local) * 100 <= d * abs(local) + 100


def validate_stp(
    local_entries: Mapping[int, int],
    stp: Stp,
    delta: Union[int, float, str, Fraction],
    *,
    reward: int,
    cycle_id: int,
    anchors: Collection[bytes],
    proposer_key: Point,
    next_root: Optional[bytes] = None,
) -> Verdict:
    """Accept iff every entry is within tolerance of the local view and the
    reward, cycle, anchor, root and proposer signature all check out."""
    if not signing.verify(proposer_key, stp.body(), stp.signature):
        return Verdict(False, "signature")
    if stp.cycle_id != cycle_id:
        return Verdict(False, "cycle")
    if stp.anchor not in anchors:
        return Verdict(False, "anchor")
    if stp.reward != reward:
        return Verdict(False, "reward")
    if next_root is not None and stp.next_root != next_root:
        return Verdict(False, "next_root")
    proposed = stp.entry_map
    if len(proposed) != len(stp.entries) or set(proposed) != set(local_entries):
        return Verdict(False, "entry_set")
    for rid in sorted(local_entries):
        if not within_tolerance(proposed[rid], local_entries[rid], delta):
            return Verdict(False, "entry", rid)
    return Verdict(True)


CONFIRMATION_FORMAT = ">I32s"
CONFIRMATION_SIZE = struct.calcsize(CONFIRMATION_FORMAT) + signing.SIGNATURE_SIZE


@dataclass(frozen=True)
class Confirmation:
    rid: int
    stp_hash: bytes
    signature: bytes

    def body(self) -> bytes:
        return struct.pack(CONFIRMATION_FORMAT, self.rid, self.stp_hash)

    def to_bytes(self) -> bytes:
        return self.body() + self.signature

    @classmethod
    def from_bytes(cls, data: bytes) -> "Confirmation":
        if len(data) != CONFIRMATION_SIZE:
            raise ValueError("bad confirmation length")
        rid, stp_hash = struct.unpack_from(CONFIRMATION_FORMAT, data)
        return cls(rid, stp_hash, data[36:])


def confirm_stp(signer: signing.Signer, rid: int, stp: Stp) -> Confirmation:
    digest = stp.digest()
    return Confirmation(rid, digest, signer.sign(struct.pack(CONFIRMATION_FORMAT, rid, digest)))


def verify_confirmation(conf: Confirmation, pubkey: Point, stp_hash: bytes) -> bool:
    return conf.stp_hash == stp_hash and signing.verify(pubkey, conf.body(), conf.signature)


def announcement_size(confirmers: int) -> int:
    return 32 + 4 + 4 * confirmers + signing.SIGNATURE_SIZE


@dataclass
class ConfirmationSet:
    """Acknowledgements collected by a proposer for one STP."""

    stp_hash: bytes
    confirmations: Dict[int, Confirmation] = field(default_factory=dict)

    def add(self, conf: Confirmation, pubkey: Point) -> bool:
        if conf.rid in self.confirmations or not verify_confirmation(conf, pubkey, self.stp_hash):
            return False
        self.confirmations[conf.rid] = conf
        return True

    @property
    def confirmers(self) -> List[int]:
        return sorted(self.confirmations)

    def announcement(self, signer: signing.Signer) -> bytes:
        """Signed list of routers invited to co-sign the Settle call."""
        body = self.stp_hash + struct.pack(">I", len(self.confirmations))
        body += b"".join(struct.pack(">I", r) for r in self.confirmers)
        return body + signer.sign(body)


def threshold_met(confirmations: Union[int, Collection[int]], zeta: Union[int, float, str, Fraction], n: int) -> bool:
    count = confirmations if isinstance(confirmations, int) else len(set(confirmations))
    return count >= threshold_m(n, zeta)
