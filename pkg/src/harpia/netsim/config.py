"""Simulation inputs: topology, flows, behaviors and contract parameters."""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import jsonschema
import yaml

from harpia.dpifa import FIELDS, SHORT_NAMES
from harpia.ledger import WEI_PER_ETHER, ContractParams, LedgerError
from harpia.settlement import TOKEN


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Honest:
    pass


@dataclass(frozen=True)
class FreeRider:
    drop_fraction: float = 1.0

    def __post_init__(self) -> None:
        if not 0 <= self.drop_fraction <= 1:
            raise ConfigError("drop_fraction must lie in [0, 1]")


@dataclass(frozen=True)
class ReportForger:
    field: str  # one of I, O, S, T, OFN (or the long names)
    delta: int
    neighbor: Optional[int] = None  # None forges every link
    unit: str = "packets"

    def __post_init__(self) -> None:
        name = SHORT_NAMES.get(self.field, self.field)
        if name not in FIELDS:
            raise ConfigError(f"unknown counter field {self.field!r}")
        object.__setattr__(self, "field", name)
        if self.unit not in ("packets", "bytes"):
            raise ConfigError("unit must be packets or bytes")


@dataclass(frozen=True)
class Spoofer:
    victim: int


@dataclass(frozen=True)
class StpCheater:
    inflate_self_by: int  # subunits


Behavior = Union[Honest, FreeRider, ReportForger, Spoofer, StpCheater]

BEHAVIOR_KINDS = {
    "honest": Honest,
    "free_rider": FreeRider,
    "report_forger": ReportForger,
    "spoofer": Spoofer,
    "stp_cheater": StpCheater,
}


@dataclass(frozen=True)
class Flow:
    src: int
    dst: int
    bytes_per_period: int
    packet_size: int = 1500

    @property
    def packets_per_period(self) -> int:
        return max(1, -(-self.bytes_per_period // self.packet_size))


@dataclass
class SimConfig:
    routers: List[int]
    links: List[Tuple[int, int, int]]  # (a, b, price in subunits per GB)
    params: ContractParams
    flows: List[Flow] = field(default_factory=list)
    behaviors: Dict[int, Behavior] = field(default_factory=dict)
    deposits: Dict[int, int] = field(default_factory=dict)  # wei; default phi
    proposers: Optional[List[int]] = None  # default every router
    seed: int = 0
    loss_prob: float = 0.0
    cycles: int = 1
    retry_rounds: int = 1  # re-request rounds before a link with missing reports is excluded

    def __post_init__(self) -> None:
        self.validate()

    @property
    def periods_per_cycle(self) -> int:
        return self.params.beta * self.params.gamma // self.params.lam

    def behavior(self, rid: int) -> Behavior:
        return self.behaviors.get(rid, Honest())

    def deposit(self, rid: int) -> int:
        return self.deposits.get(rid, self.params.phi)

    def adjacency(self) -> Dict[int, List[int]]:
        adj: Dict[int, List[int]] = {r: [] for r in self.routers}
        for a, b, _ in self.links:
            adj[a].append(b)
            adj[b].append(a)
        return {r: sorted(v) for r, v in adj.items()}

    def validate(self) -> None:
        routers = set(self.routers)
        if len(routers) != len(self.routers) or not routers:
            raise ConfigError("router ids must be unique and non-empty")
        if any(r < 0 or r >= 2**32 for r in routers):
            raise ConfigError("router ids must fit in 32 bits")
        seen = set()
        for a, b, price in self.links:
            if a not in routers or b not in routers or a == b:
                raise ConfigError(f"bad link ({a}, {b})")
            if frozenset((a, b)) in seen:
                raise ConfigError(f"duplicate link ({a}, {b})")
            seen.add(frozenset((a, b)))
            if price < 0:
                raise ConfigError("link prices must be non-negative")
        if not _connected(self.adjacency()):
            raise ConfigError("topology is disconnected")
        for f in self.flows:
            if f.src not in routers or f.dst not in routers or f.src == f.dst:
                raise ConfigError(f"bad flow {f.src} -> {f.dst}")
            if f.bytes_per_period < 0 or f.packet_size <= 0:
                raise ConfigError("flow sizes must be positive")
        for rid, b in self.behaviors.items():
            if rid not in routers:
                raise ConfigError(f"behavior for unknown router {rid}")
            if isinstance(b, Spoofer) and (b.victim not in routers or b.victim == rid):
                raise ConfigError("spoofer victim must be another router")
            if isinstance(b, ReportForger) and b.neighbor is not None and b.neighbor not in self.adjacency()[rid]:
                raise ConfigError("forged neighbor is not adjacent")
        if self.proposers is not None and (not self.proposers or not set(self.proposers) <= routers):
            raise ConfigError("proposers must be a non-empty subset of the routers")
        for rid, wei in self.deposits.items():
            if rid not in routers or wei < self.params.phi:
                raise ConfigError(f"deposit for router {rid} is below phi")
        if not 0 <= self.loss_prob < 1:
            raise ConfigError("loss_prob must lie in [0, 1)")
        if self.retry_rounds < 1:
            raise ConfigError("retry_rounds must be at least 1")
        if self.cycles < 0:
            raise ConfigError("cycles must be non-negative")
        if self.periods_per_cycle < 1:
            raise ConfigError("a cycle must contain at least one report period")


def _connected(adj: Mapping[int, Sequence[int]]) -> bool:
    if not adj:
        return False
    start = next(iter(adj))
    seen = {start}
    stack = [start]
    while stack:
        for v in adj[stack.pop()]:
            if v not in seen:
                seen.add(v)
                stack.append(v)
    return len(seen) == len(adj)


# topology generators


def generate_edges(kind: str, n: int, offsets: Sequence[int] = (), hub: int = 0) -> List[Tuple[int, int]]:
    if n < 2:
        raise ConfigError("generated topologies need at least two routers")
    if kind == "chain":
        return [(i, i + 1) for i in range(n - 1)]
    if kind == "ring":
        return sorted({(min(i, (i + 1) % n), max(i, (i + 1) % n)) for i in range(n)})
    if kind == "star":
        return [(min(hub, i), max(hub, i)) for i in range(n) if i != hub]
    if kind == "complete":
        return [(i, j) for i in range(n) for j in range(i + 1, n)]
    if kind == "circulant":
        edges = set()
        for i in range(n):
            for k in offsets:
                j = (i + k) % n
                if j != i:
                    edges.add((min(i, j), max(i, j)))
        return sorted(edges)
    raise ConfigError(f"unknown topology kind {kind!r}")


# scenario files

_number = {"type": "number"}
_int = {"type": "integer"}
_amount = {"anyOf": [{"type": "number", "minimum": 0}, {"type": "string", "pattern": r"^[0-9]+(\.[0-9]+)?$"}]}

SCENARIO_SCHEMA: Dict[str, Any] = {
    "type": "object",
    "additionalProperties": False,
    "required": ["topology", "params"],
    "properties": {
        "name": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
        "cycles": {"type": "integer", "minimum": 0},
        "loss_prob": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "retry_rounds": {"type": "integer", "minimum": 1},
        "proposers": {"type": "array", "items": _int, "minItems": 1},
        "params": {
            "type": "object",
            "additionalProperties": False,
            "required": ["beta", "lambda", "zeta", "delta", "xi", "tau_ether", "phi_ether", "reward_tokens"],
            "properties": {
                "beta": {"type": "integer", "minimum": 1},
                "lambda": {"type": "integer", "minimum": 1},
                "gamma": {"type": "integer", "minimum": 1},
                "zeta": _number,
                "delta": {"type": "number", "minimum": 0},
                "xi": {"type": "integer", "minimum": 1},
                "tau_ether": _amount,
                "phi_ether": _amount,
                "reward_tokens": _amount,
            },
        },
        "topology": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "routers": {"type": "array", "items": _int},
                "links": {
                    "type": "array",
                    "items": {"type": "array", "items": _number, "minItems": 2, "maxItems": 3},
                },
                "generate": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["kind", "n"],
                    "properties": {
                        "kind": {"enum": ["chain", "ring", "star", "complete", "circulant"]},
                        "n": {"type": "integer", "minimum": 2},
                        "offsets": {"type": "array", "items": _int},
                        "hub": _int,
                    },
                },
                "price_tokens_per_gb": _amount,
            },
            "oneOf": [{"required": ["links"]}, {"required": ["generate"]}],
        },
        "flows": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["src", "dst", "bytes_per_period"],
                "properties": {
                    "src": _int,
                    "dst": _int,
                    "bytes_per_period": {"type": "integer", "minimum": 0},
                    "packet_size": {"type": "integer", "minimum": 1},
                },
            },
        },
        "behaviors": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["router", "kind"],
                "properties": {
                    "router": _int,
                    "kind": {"enum": sorted(BEHAVIOR_KINDS)},
                    "drop_fraction": {"type": "number", "minimum": 0, "maximum": 1},
                    "field": {"type": "string"},
                    "delta": _int,
                    "neighbor": _int,
                    "unit": {"enum": ["packets", "bytes"]},
                    "victim": _int,
                    "inflate_self_by": _int,
                },
            },
        },
        "deposits": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "default_ether": _amount,
                "routers": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "additionalProperties": False,
                        "required": ["router", "ether"],
                        "properties": {"router": _int, "ether": _amount},
                    },
                },
            },
        },
    },
}


def _scaled(value: Union[int, float, str], unit: int) -> int:
    return int(Fraction(str(value)) * unit)


def config_from_dict(doc: Mapping[str, Any]) -> SimConfig:
    """Validate a scenario document against the schema and build a config."""
    try:
        jsonschema.validate(doc, SCENARIO_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"scenario invalid at {where}: {exc.message}") from exc
    p = doc["params"]
    try:
        params = ContractParams(
            beta=p["beta"], lam=p["lambda"], zeta=p["zeta"], delta=p["delta"], xi=p["xi"],
            tau=_scaled(p["tau_ether"], WEI_PER_ETHER), phi=_scaled(p["phi_ether"], WEI_PER_ETHER),
            reward=_scaled(p["reward_tokens"], TOKEN), gamma=p.get("gamma", 15),
        )
    except LedgerError as exc:
        raise ConfigError(f"bad contract parameters: {exc}") from exc
    topo = doc["topology"]
    default_price = _scaled(topo.get("price_tokens_per_gb", 1), TOKEN)
    if "generate" in topo:
        g = topo["generate"]
        pairs = generate_edges(g["kind"], g["n"], g.get("offsets", ()), g.get("hub", 0))
        links = [(a, b, default_price) for a, b in pairs]
        routers = list(range(g["n"]))
    else:
        links = []
        for item in topo["links"]:
            if any(x != int(x) for x in item[:2]):
                raise ConfigError("link endpoints must be integers")
            price = _scaled(item[2], TOKEN) if len(item) == 3 else default_price
            links.append((int(item[0]), int(item[1]), price))
        routers = sorted({r for a, b, _ in links for r in (a, b)})
    if "routers" in topo:
        routers = list(topo["routers"])
    behaviors: Dict[int, Behavior] = {}
    for b in doc.get("behaviors", []):
        kind = BEHAVIOR_KINDS[b["kind"]]
        if b["router"] in behaviors:
            raise ConfigError(f"router {b['router']} has more than one behavior")
        kwargs = {k: v for k, v in b.items() if k not in ("router", "kind")}
        try:
            behaviors[b["router"]] = kind(**kwargs)
        except TypeError as exc:
            raise ConfigError(f"bad options for {b['kind']}: {exc}") from exc
    deposits: Dict[int, int] = {}
    dep = doc.get("deposits", {})
    if "default_ether" in dep:
        deposits = {r: _scaled(dep["default_ether"], WEI_PER_ETHER) for r in routers}
    for item in dep.get("routers", []):
        deposits[item["router"]] = _scaled(item["ether"], WEI_PER_ETHER)
    flows = [Flow(f["src"], f["dst"], f["bytes_per_period"], f.get("packet_size", 1500)) for f in doc.get("flows", [])]
    return SimConfig(
        routers=sorted(routers), links=links, params=params, flows=flows, behaviors=behaviors,
        deposits=deposits, proposers=doc.get("proposers"), seed=doc.get("seed", 0),
        loss_prob=doc.get("loss_prob", 0.0), cycles=doc.get("cycles", 1),
        retry_rounds=doc.get("retry_rounds", 1),
    )


def load_scenario(path: Union[str, Path]) -> SimConfig:
    try:
        doc = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("scenario must be a mapping")
    return config_from_dict(doc)
