"""Append-only per-cycle metrics with CSV and JSON export."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from harpia.netsim.bus import MESSAGE_CLASSES

ROW_FIELDS = (
    "cycle", "rid", "member", "tokens", "ether_wei", "entry", "reward", "evicted",
    "violations_symmetry", "violations_conservation", "violations_ofn",
)


@dataclass
class RouterRow:
    cycle: int
    rid: int
    member: bool
    tokens: int
    ether_wei: int
    entry: Optional[int]  # C_n applied by this cycle's settle, if any
    reward: int
    evicted: bool
    violations_symmetry: int = 0
    violations_conservation: int = 0
    violations_ofn: int = 0


@dataclass
class CycleSummary:
    cycle: int
    settled_by: Optional[int] = None
    skipped: Optional[str] = None
    rejections: List[List[Any]] = field(default_factory=list)  # [proposer, reason]
    confirmations: Dict[str, List[int]] = field(default_factory=dict)  # proposer -> confirmers
    proposal_failures: Dict[str, str] = field(default_factory=dict)  # proposer -> why no STP
    bytes: Dict[str, int] = field(default_factory=dict)
    delivery: Dict[str, float] = field(default_factory=dict)  # "src->dst" -> delivered fraction
    violations: List[Dict[str, Any]] = field(default_factory=list)
    reports_rejected: Dict[str, int] = field(default_factory=dict)
    excluded_links: List[List[int]] = field(default_factory=list)
    evicted: List[int] = field(default_factory=list)
    members: List[int] = field(default_factory=list)
    entries_sum: int = 0
    supply: int = 0
    escrow: int = 0


@dataclass
class Metrics:
    seed: int
    rows: List[RouterRow] = field(default_factory=list)
    cycles: List[CycleSummary] = field(default_factory=list)

    def bytes_total(self) -> Dict[str, int]:
        out = {k: 0 for k in MESSAGE_CLASSES}
        for c in self.cycles:
            for k, v in c.bytes.items():
                out[k] += v
        return out

    @property
    def settles(self) -> int:
        return sum(1 for c in self.cycles if c.settled_by is not None)

    def final_tokens(self) -> Dict[int, int]:
        if not self.cycles:
            return {}
        last = self.cycles[-1].cycle
        return {r.rid: r.tokens for r in self.rows if r.cycle == last}

    def row(self, cycle: int, rid: int) -> RouterRow:
        for r in self.rows:
            if r.cycle == cycle and r.rid == rid:
                return r
        raise KeyError((cycle, rid))

    def violations_against(self, rid: int, criterion: str) -> List[int]:
        """Cycles in which ``rid`` was implicated by ``criterion``."""
        return sorted({c.cycle for c in self.cycles for v in c.violations
                       if v["router"] == rid and v["criterion"] == criterion})

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=ROW_FIELDS, lineterminator="\n")
        writer.writeheader()
        for r in self.rows:
            d = asdict(r)
            d["member"] = int(d["member"])
            d["evicted"] = int(d["evicted"])
            d["entry"] = "" if d["entry"] is None else d["entry"]
            writer.writerow(d)
        return buf.getvalue()

    def summary(self) -> Dict[str, Any]:
        return {
            "seed": self.seed,
            "cycles": [asdict(c) for c in self.cycles],
            "settles": self.settles,
            "bytes_total": self.bytes_total(),
            "final_tokens": {str(k): v for k, v in sorted(self.final_tokens().items())},
        }

    def to_json(self) -> str:
        return json.dumps(self.summary(), sort_keys=True, indent=2)

    def write(self, out_dir: Union[str, Path]) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(self.to_csv())
        (out / "summary.json").write_text(self.to_json() + "\n")
