"""Decentralised per-link traffic accounting (DPIFA).

Each router counts, per neighbor, input (I), output (O), started (S),
terminated (T) and originated-from-neighbor (OFN) traffic in packets
and bytes. Every report period it signs one report per neighbor link and
broadcasts it; every router aggregates the cycle's reports and audits
them with three credibility checks:

* symmetry:      O[n,m] == I[m,n]
* conservation:  sum I[n,*] - sum T[n,*] == sum O[n,*] - sum S[n,*]
* origin:        OFN[m,n] == S[n,m]
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Set, Tuple

from harpia import signing
from harpia.secp256k1 import Point, decode_point, encode_point

FIELDS = ("input", "output", "started", "terminated", "ofn")
SHORT_NAMES = {"I": "input", "O": "output", "S": "started", "T": "terminated", "OFN": "ofn"}

REPORT_VERSION = 1
HEADER_FORMAT = ">IIIII5II"  # version, rid, nid, cycle, seq, 5 packet counters, extension digest
HEADER_SIZE = struct.calcsize(HEADER_FORMAT)
TRAILER_FORMAT = ">II"  # timestamp, nonce
EXTENSION_FORMAT = ">5Q"  # byte counters
EXTENSION_SIZE = struct.calcsize(EXTENSION_FORMAT)
REPORT_SIZE = HEADER_SIZE + struct.calcsize(TRAILER_FORMAT) + signing.SIGNATURE_SIZE

assert HEADER_SIZE == 44 and REPORT_SIZE == 116


@dataclass
class Tally:
    packets: int = 0
    bytes: int = 0


def _tally() -> Tally:
    return Tally()


@dataclass
class LinkCounters:
    input: Tally = field(default_factory=_tally)
    output: Tally = field(default_factory=_tally)
    started: Tally = field(default_factory=_tally)
    terminated: Tally = field(default_factory=_tally)
    ofn: Tally = field(default_factory=_tally)

    def as_tuple(self) -> Tuple[int, ...]:
        """Packets for the five fields, then bytes for the five fields."""
        tallies = [getattr(self, f) for f in FIELDS]
        return tuple(t.packets for t in tallies) + tuple(t.bytes for t in tallies)

    @classmethod
    def from_tuple(cls, values: Sequence[int]) -> "LinkCounters":
        return cls(*(Tally(values[i], values[i + 5]) for i in range(5)))

    def copy(self) -> "LinkCounters":
        return LinkCounters.from_tuple(self.as_tuple())

    def __add__(self, other: "LinkCounters") -> "LinkCounters":
        return LinkCounters.from_tuple([a + b for a, b in zip(self.as_tuple(), other.as_tuple())])

    def is_consistent(self) -> bool:
        return all(
            part.packets <= whole.packets and part.bytes <= whole.bytes
            for part, whole in (
                (self.started, self.output),
                (self.terminated, self.input),
                (self.ofn, self.input),
            )
        )


@dataclass(frozen=True)
class PacketEvent:
    direction: str  # "in" or "out"
    neighbor: int
    size: int  # total bytes carried by this event
    originated_here: bool = False
    terminated_here: bool = False
    source: Optional[int] = None
    packets: int = 1


def account(counters: LinkCounters, event: PacketEvent) -> LinkCounters:
    """Apply one packet event (or a batch of identical packets) in place."""
    n, b = event.packets, event.size
    if event.direction == "in":
        counters.input.packets += n
        counters.input.bytes += b
        if event.terminated_here:
            counters.terminated.packets += n
            counters.terminated.bytes += b
        if event.source == event.neighbor:
            counters.ofn.packets += n
            counters.ofn.bytes += b
    elif event.direction == "out":
        counters.output.packets += n
        counters.output.bytes += b
        if event.originated_here:
            counters.started.packets += n
            counters.started.bytes += b
    else:
        raise ValueError(f"unknown direction {event.direction!r}")
    return counters


@dataclass(frozen=True)
class DpifaReport:
    rid: int
    nid: int
    cycle: int
    seq: int
    values: Tuple[int, ...]  # LinkCounters.as_tuple()
    timestamp: int
    nonce: int
    signature: bytes = b""
    version: int = REPORT_VERSION

    @property
    def key(self) -> Tuple[int, int, int]:
        return self.rid, self.nid, self.seq

    @property
    def counters(self) -> LinkCounters:
        return LinkCounters.from_tuple(self.values)

    def extension(self) -> bytes:
        return struct.pack(EXTENSION_FORMAT, *self.values[5:])

    def header(self) -> bytes:
        digest = int.from_bytes(hashlib.sha256(self.extension()).digest()[:4], "big")
        return struct.pack(
            HEADER_FORMAT, self.version, self.rid, self.nid, self.cycle, self.seq, *self.values[:5], digest
        )

    def signed_message(self) -> bytes:
        return self.header() + struct.pack(TRAILER_FORMAT, self.timestamp, self.nonce) + self.extension()

    def to_wire(self) -> bytes:
        """The 116-byte report; byte counters travel in :meth:`extension`."""
        return self.header() + struct.pack(TRAILER_FORMAT, self.timestamp, self.nonce) + self.signature

    @classmethod
    def from_wire(cls, wire: bytes, extension: bytes) -> "DpifaReport":
        if len(wire) != REPORT_SIZE or len(extension) != EXTENSION_SIZE:
            raise ValueError("bad DPIFA report length")
        fields = struct.unpack(HEADER_FORMAT, wire[:HEADER_SIZE])
        version, rid, nid, cycle, seq = fields[:5]
        packets, digest = fields[5:10], fields[10]
        if digest != int.from_bytes(hashlib.sha256(extension).digest()[:4], "big"):
            raise ValueError("extension record does not match the report header")
        timestamp, nonce = struct.unpack(TRAILER_FORMAT, wire[HEADER_SIZE : HEADER_SIZE + 8])
        byte_values = struct.unpack(EXTENSION_FORMAT, extension)
        return cls(rid, nid, cycle, seq, tuple(packets) + tuple(byte_values), timestamp, nonce,
                   wire[HEADER_SIZE + 8 :], version)


def sign_report(
    signer: signing.Signer,
    rid: int,
    nid: int,
    cycle: int,
    seq: int,
    counters: LinkCounters,
    timestamp: int,
    nonce: int,
) -> DpifaReport:
    if rid == nid:
        raise ValueError("a router cannot report on a link to itself")
    unsigned = DpifaReport(rid, nid, cycle, seq, counters.as_tuple(), timestamp, nonce)
    return DpifaReport(rid, nid, cycle, seq, unsigned.values, timestamp, nonce, signer.sign(unsigned.signed_message()))


def verify_report(report: DpifaReport, pubkey: Point) -> bool:
    try:
        message = report.signed_message()
    except struct.error:
        return False
    return signing.verify(pubkey, message, report.signature)


class UnsignedIdentityError(RuntimeError):
    pass


class RouterAccounting:
    """Live per-neighbor counters for one router plus report emission."""

    def __init__(self, rid: int, signer: Optional[signing.Signer], neighbors: Iterable[int], period: int):
        self.rid = rid
        self.signer = signer
        self.period = period
        self.current: Dict[int, LinkCounters] = {n: LinkCounters() for n in sorted(neighbors)}
        self.last_emit: Optional[int] = None
        self._nonce_cycle: Optional[int] = None
        self._used_nonces: Set[int] = set()

    def record(self, event: PacketEvent) -> None:
        account(self.current[event.neighbor], event)

    def drop_neighbor(self, nid: int) -> None:
        self.current.pop(nid, None)

    def _fresh_nonce(self, cycle: int, draw: Callable[[], int]) -> int:
        if self._nonce_cycle != cycle:
            self._nonce_cycle = cycle
            self._used_nonces = set()
        while True:
            nonce = draw() & 0xFFFFFFFF
            if nonce not in self._used_nonces:
                self._used_nonces.add(nonce)
                return nonce


Tamper = Callable[[int, LinkCounters], LinkCounters]


def emit_reports(
    state: RouterAccounting,
    seq: int,
    *,
    cycle: int,
    timestamp: int,
    nonce_source: Callable[[], int],
    tamper: Optional[Tamper] = None,
) -> List[DpifaReport]:
    """Sign one report per neighbor for the period just ended and reset."""
    if state.signer is None:
        raise UnsignedIdentityError(f"router {state.rid} has no signing key")
    if state.last_emit is not None and timestamp - state.last_emit < state.period:
        raise ValueError("report period has not elapsed")
    reports = []
    for nid in sorted(state.current):
        snapshot = state.current[nid]
        if tamper is not None:
            snapshot = tamper(nid, snapshot.copy())
        nonce = state._fresh_nonce(cycle, nonce_source)
        reports.append(sign_report(state.signer, state.rid, nid, cycle, seq, snapshot, timestamp, nonce))
        state.current[nid] = LinkCounters()
    state.last_emit = timestamp
    return reports


class RejectReason(Enum):
    SELF_LINK = "self_link"
    UNKNOWN_REPORTER = "unknown_reporter"
    WRONG_CYCLE = "wrong_cycle"
    STALE = "stale_timestamp"
    DUPLICATE = "duplicate"
    REPLAYED_NONCE = "replayed_nonce"
    BAD_SIGNATURE = "bad_signature"


Verifier = Callable[[DpifaReport, Point], bool]


class CycleStore:
    """Reports accepted during one settlement cycle.

    ``seqs`` is the cycle's sequence-number range and ``window`` the
    half-open timestamp interval the cycle covers.
    """

    def __init__(
        self,
        cycle_id: int,
        seqs: range,
        window: Tuple[int, int],
        directory: Mapping[int, Point],
        verifier: Verifier = verify_report,
    ):
        self.cycle_id = cycle_id
        self.seqs = seqs
        self.window = window
        self.directory = directory
        self.verifier = verifier
        self.reports: Dict[Tuple[int, int, int], DpifaReport] = {}
        self._nonces: Dict[int, Set[int]] = {}
        self.rejected: Dict[RejectReason, int] = {}

    def ingest(self, report: DpifaReport) -> Optional[RejectReason]:
        """Store ``report``; returns None when accepted, else the reason."""
        reason = self._check(report)
        if reason is None:
            self.reports[report.key] = report
            self._nonces.setdefault(report.rid, set()).add(report.nonce)
        else:
            self.rejected[reason] = self.rejected.get(reason, 0) + 1
        return reason

    def _check(self, report: DpifaReport) -> Optional[RejectReason]:
        if report.rid == report.nid:
            return RejectReason.SELF_LINK
        pubkey = self.directory.get(report.rid)
        if pubkey is None:
            return RejectReason.UNKNOWN_REPORTER
        if report.cycle != self.cycle_id or report.seq not in self.seqs:
            return RejectReason.WRONG_CYCLE
        if not self.window[0] <= report.timestamp < self.window[1]:
            return RejectReason.STALE
        if report.key in self.reports:
            return RejectReason.DUPLICATE
        if report.nonce in self._nonces.get(report.rid, ()):
            return RejectReason.REPLAYED_NONCE
        if not self.verifier(report, pubkey):
            return RejectReason.BAD_SIGNATURE
        return None

    def missing(self, links: Iterable[Tuple[int, int]]) -> List[Tuple[int, int, int]]:
        """(rid, nid, seq) tuples of ``links`` with no accepted report."""
        return [
            (rid, nid, seq)
            for rid, nid in sorted(links)
            for seq in self.seqs
            if (rid, nid, seq) not in self.reports
        ]

    def __len__(self) -> int:
        return len(self.reports)

    def __contains__(self, key: object) -> bool:
        return key in self.reports


def ingest(store: CycleStore, report: DpifaReport) -> bool:
    return store.ingest(report) is None


def _zero() -> LinkCounters:
    return LinkCounters()


@dataclass
class AggregatedCounters:
    links: Dict[Tuple[int, int], LinkCounters]
    missing: List[Tuple[int, int, int]] = field(default_factory=list)
    excluded: Set[frozenset] = field(default_factory=set)

    def get(self, rid: int, nid: int) -> LinkCounters:
        return self.links.get((rid, nid)) or _zero()

    def routers(self) -> Set[int]:
        return {r for link in self.links for r in link}

    def neighbors(self, rid: int) -> List[int]:
        return sorted(nid for (r, nid) in self.links if r == rid)

    def without_incomplete(self) -> "AggregatedCounters":
        """Drop every undirected link that still has a missing report."""
        bad = {frozenset((r, n)) for r, n, _ in self.missing}
        kept = {k: v for k, v in self.links.items() if frozenset(k) not in bad}
        return AggregatedCounters(kept, [], self.excluded | bad)


def aggregate(
    store: CycleStore, expected_links: Optional[Iterable[Tuple[int, int]]] = None
) -> AggregatedCounters:
    """Sum each directed link over the cycle and list absent (rid, nid, seq).

    Links expected to report default to every reported link in both
    directions; pass the registered topology to also catch links that
    went completely silent.
    """
    sums: Dict[Tuple[int, int], List[int]] = {}
    for (rid, nid, _), report in store.reports.items():
        acc = sums.get((rid, nid))
        if acc is None:
            sums[(rid, nid)] = list(report.values)
        else:
            for i, v in enumerate(report.values):
                acc[i] += v
    expected: Set[Tuple[int, int]] = set(expected_links or ())
    if expected_links is None:
        for rid, nid in sums:
            expected.add((rid, nid))
            expected.add((nid, rid))
    missing = store.missing(expected)
    links = {k: LinkCounters.from_tuple(v) for k, v in sorted(sums.items())}
    for link in expected:
        links.setdefault(link, LinkCounters())
    return AggregatedCounters(dict(sorted(links.items())), missing)


@dataclass(frozen=True)
class Violation:
    criterion: str  # "symmetry" | "conservation" | "ofn"
    router: int
    neighbor: Optional[int]
    unit: str  # "packets" | "bytes"
    left: int
    right: int


UNITS = ("packets", "bytes")


def _undirected_pairs(agg: AggregatedCounters) -> List[Tuple[int, int]]:
    return sorted({(min(a, b), max(a, b)) for a, b in agg.links})


def check_symmetry(agg: AggregatedCounters) -> List[Violation]:
    """Every output towards a neighbor must show up as that neighbor's input."""
    out = []
    for a, b in _undirected_pairs(agg):
        for n, m in ((a, b), (b, a)):
            sent, received = agg.get(n, m).output, agg.get(m, n).input
            for unit in UNITS:
                left, right = getattr(sent, unit), getattr(received, unit)
                if left != right:
                    out.append(Violation("symmetry", n, m, unit, left, right))
    return out


def _conservation_sides(agg: AggregatedCounters, n: int, unit: str) -> Tuple[int, int]:
    forwarded_in = forwarded_out = 0
    for (rid, _), c in agg.links.items():
        if rid == n:
            forwarded_in += getattr(c.input, unit) - getattr(c.terminated, unit)
            forwarded_out += getattr(c.output, unit) - getattr(c.started, unit)
    return forwarded_in, forwarded_out


def conservation_auditable(agg: AggregatedCounters, n: int) -> bool:
    """False when one of n's links was excluded, leaving its sums partial."""
    return not any(n in link for link in agg.excluded)


def check_conservation(agg: AggregatedCounters, n: int) -> bool:
    return all(a == b for a, b in (_conservation_sides(agg, n, u) for u in UNITS))


def conservation_violations(agg: AggregatedCounters, routers: Optional[Iterable[int]] = None) -> List[Violation]:
    out = []
    for n in sorted(routers if routers is not None else {r for r, _ in agg.links}):
        if not conservation_auditable(agg, n):
            continue
        for unit in UNITS:
            left, right = _conservation_sides(agg, n, unit)
            if left != right:
                out.append(Violation("conservation", n, None, unit, left, right))
    return out


def check_ofn(agg: AggregatedCounters) -> List[Violation]:
    """What n says it originated towards m must match m's origin count for n."""
    out = []
    for a, b in _undirected_pairs(agg):
        for n, m in ((a, b), (b, a)):
            started, origin = agg.get(n, m).started, agg.get(m, n).ofn
            for unit in UNITS:
                left, right = getattr(started, unit), getattr(origin, unit)
                if left != right:
                    out.append(Violation("ofn", n, m, unit, left, right))
    return out


def audit(agg: AggregatedCounters) -> List[Violation]:
    return check_symmetry(agg) + conservation_violations(agg) + check_ofn(agg)


def infer_topology(
    agg: AggregatedCounters,
    registered_links: Iterable[Tuple[int, int]] = (),
    members: Optional[Iterable[int]] = None,
) -> Dict[int, Set[int]]:
    """Undirected adjacency from reported links plus registered ones."""
    allowed = set(members) if members is not None else None
    graph: Dict[int, Set[int]] = {m: set() for m in sorted(allowed or ())}
    for a, b in list(agg.links) + list(registered_links):
        if allowed is not None and (a not in allowed or b not in allowed):
            continue
        graph.setdefault(a, set()).add(b)
        graph.setdefault(b, set()).add(a)
    return graph


# Newline-delimited dump format used by ``harpia validate-reports``.


def export_records(
    reports: Iterable[DpifaReport],
    directory: Mapping[int, Point],
    *,
    cycle: int,
    seqs: range,
    window: Tuple[int, int],
) -> Iterator[str]:
    yield json.dumps(
        {"type": "cycle", "cycle": cycle, "seq_start": seqs.start, "seq_stop": seqs.stop,
         "window": list(window)}
    )
    for rid in sorted(directory):
        yield json.dumps({"type": "key", "rid": rid, "pubkey": encode_point(directory[rid]).hex()})
    for report in sorted(reports, key=lambda r: r.key):
        yield json.dumps({"type": "report", "wire": report.to_wire().hex(), "ext": report.extension().hex()})


def import_records(lines: Iterable[str]) -> Tuple[CycleStore, List[Tuple[int, DpifaReport, RejectReason]]]:
    """Rebuild a store from a dump; returns it with the rejected reports.

    Raises ValueError on malformed records.
    """
    meta = None
    directory: Dict[int, Point] = {}
    pending: List[DpifaReport] = []
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line:
            continue
        try:
            rec = json.loads(line)
            kind = rec["type"]
            if kind == "cycle":
                meta = rec
            elif kind == "key":
                directory[int(rec["rid"])] = decode_point(bytes.fromhex(rec["pubkey"]))
            elif kind == "report":
                pending.append(DpifaReport.from_wire(bytes.fromhex(rec["wire"]), bytes.fromhex(rec["ext"])))
            else:
                raise ValueError(f"unknown record type {kind!r}")
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"line {lineno}: {exc}") from exc
    if meta is None:
        raise ValueError("dump has no cycle record")
    store = CycleStore(
        int(meta["cycle"]), range(int(meta["seq_start"]), int(meta["seq_stop"])),
        (int(meta["window"][0]), int(meta["window"][1])), directory,
    )
    rejected = []
    for i, report in enumerate(pending):
        reason = store.ingest(report)
        if reason is not None:
            rejected.append((i, report, reason))
    return store, rejected
