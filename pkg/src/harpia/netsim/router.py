"""Router agents: counters, report emission and per-cycle report stores."""

from __future__ import annotations

import random
from typing import Dict, List, Optional, Tuple

from harpia.dpifa import (
    CycleStore,
    DpifaReport,
    LinkCounters,
    PacketEvent,
    RouterAccounting,
    Verifier,
    emit_reports,
)
from harpia.musig import KeyPair
from harpia.netsim.config import Behavior, FreeRider, Honest, ReportForger, Spoofer
from harpia.secp256k1 import N, Point
from harpia.signing import Signer


class RouterAgent:
    def __init__(self, rid: int, keypair: KeyPair, behavior: Behavior, neighbors: List[int], period: int, seed: int):
        self.rid = rid
        self.keypair = keypair
        self.signer = Signer(keypair.secret)
        self.behavior = behavior if behavior is not None else Honest()
        self.accounting = RouterAccounting(rid, self.signer, neighbors, period)
        self.nonce_rng = random.Random(f"{seed}:report-nonce:{rid}")
        self.stp_rng = random.Random(f"{seed}:stp-nonce:{rid}")
        self.musig_rng = random.Random(f"{seed}:musig-nonce:{rid}")
        self.store: Optional[CycleStore] = None
        self.emitted: Dict[Tuple[int, int, int], DpifaReport] = {}

    @property
    def public(self) -> Point:
        return self.keypair.public

    @property
    def neighbors(self) -> List[int]:
        return sorted(self.accounting.current)

    def drop_neighbor(self, nid: int) -> None:
        self.accounting.drop_neighbor(nid)

    def begin_cycle(self, cycle: int, seqs: range, window: Tuple[int, int], directory: Dict[int, Point],
                    verifier: Verifier) -> None:
        self.store = CycleStore(cycle, seqs, window, directory, verifier)
        self.emitted = {}

    # traffic

    def source_address(self) -> int:
        """Address written into packets this router originates."""
        return self.behavior.victim if isinstance(self.behavior, Spoofer) else self.rid

    def transit_filter(self, packets: int, nbytes: int) -> Tuple[int, int]:
        """What survives this router when it is asked to forward a batch."""
        if isinstance(self.behavior, FreeRider) and packets:
            kept = packets - int(packets * self.behavior.drop_fraction)
            return kept, nbytes * kept // packets
        return packets, nbytes

    def send(self, nid: int, packets: int, nbytes: int, originated: bool) -> None:
        self.accounting.record(PacketEvent("out", nid, nbytes, originated_here=originated, packets=packets))

    def receive(self, nid: int, packets: int, nbytes: int, source: int, terminated: bool) -> None:
        self.accounting.record(
            PacketEvent("in", nid, nbytes, terminated_here=terminated, source=source, packets=packets)
        )

    # reporting

    def _tamper(self, nid: int, counters: LinkCounters) -> LinkCounters:
        b = self.behavior
        assert isinstance(b, ReportForger)
        if b.neighbor is None or b.neighbor == nid:
            tally = getattr(counters, b.field)
            setattr(tally, b.unit, max(0, getattr(tally, b.unit) + b.delta))
        return counters

    def emit(self, cycle: int, seq: int, timestamp: int) -> List[DpifaReport]:
        tamper = self._tamper if isinstance(self.behavior, ReportForger) else None
        reports = emit_reports(
            self.accounting, seq, cycle=cycle, timestamp=timestamp,
            nonce_source=lambda: self.nonce_rng.getrandbits(32), tamper=tamper,
        )
        for r in reports:
            self.emitted[r.key] = r
        return reports

    def musig_nonce(self) -> int:
        return self.musig_rng.randrange(1, N)
