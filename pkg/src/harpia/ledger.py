"""In-process emulation of the settlement contract and its block clock.

Ether amounts are integers in wei and token amounts integers in subunits
(10^9 per token). One ether buys one token at deployment, so the initial
rate is ``WEI_PER_SUBUNIT`` wei per subunit; afterwards the rate is the
escrowed ether not tied to a pending join divided by the token supply.
"""

from __future__ import annotations

import copy
import hashlib
import json
import struct
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

from harpia import musig, signing
from harpia.merkle import MerkleProof, build_tree, prove_membership, verify_membership
from harpia.musig import KeyList, MultiSignature
from harpia.secp256k1 import Point, decode_point, encode_point
from harpia.settlement import PriceView, Stp

WEI_PER_ETHER = 10**18
SUBUNITS_PER_TOKEN = 10**9
WEI_PER_SUBUNIT = WEI_PER_ETHER // SUBUNITS_PER_TOKEN


class LedgerError(Exception):
    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason
        self.detail = detail


@dataclass(frozen=True)
class ContractParams:
    beta: int  # blocks per cycle
    lam: int  # report period, seconds
    zeta: Union[int, float, str]  # confirmation threshold, percent
    delta: Union[int, float, str]  # accounting tolerance, percent
    xi: int  # STP validity, blocks
    tau: int  # eviction threshold, wei
    phi: int  # minimum join deposit, wei
    reward: int  # subunits minted per settle
    gamma: int = 15  # seconds per block

    def __post_init__(self) -> None:
        z = Fraction(str(self.zeta))
        if not 50 <= z < 100:
            raise LedgerError("bad_params", "zeta must lie in [50, 100)")
        if not 0 < self.xi <= self.beta:
            raise LedgerError("bad_params", "need 0 < xi <= beta")
        if not self.phi > self.tau >= 0:
            raise LedgerError("bad_params", "need phi > tau >= 0")
        if self.reward < 0 or self.gamma <= 0 or self.lam <= 0 or Fraction(str(self.delta)) < 0:
            raise LedgerError("bad_params", "negative or zero quantity")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "beta": self.beta, "lam": self.lam, "zeta": str(self.zeta), "delta": str(self.delta),
            "xi": self.xi, "tau": self.tau, "phi": self.phi, "reward": self.reward, "gamma": self.gamma,
        }

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "ContractParams":
        return cls(**d)


@dataclass
class Member:
    address: bytes
    pubkey: Point
    rid: int
    tokens: int

    @property
    def encoded_key(self) -> bytes:
        return encode_point(self.pubkey)


@dataclass
class ChainClock:
    gamma: int
    height: int = 0
    hashes: List[bytes] = field(default_factory=lambda: [hashlib.sha256(b"genesis").digest()])

    @property
    def hash(self) -> bytes:
        return self.hashes[self.height]

    @property
    def time(self) -> int:
        return self.height * self.gamma

    def advance(self, k: int = 1) -> None:
        if k < 0:
            raise ValueError("the chain cannot go backwards")
        for _ in range(k):
            self.height += 1
            self.hashes.append(hashlib.sha256(struct.pack(">Q", self.height) + self.hashes[-1]).digest())

    def height_of(self, block_hash: bytes) -> Optional[int]:
        # recent blocks are the interesting ones, so search from the tip
        for h in range(self.height, -1, -1):
            if self.hashes[h] == block_hash:
                return h
        return None


@dataclass(frozen=True)
class MusigBundle:
    """Everything a MuSig-gated call carries: sigma, the aggregated key and
    its Merkle membership proof."""

    signature: MultiSignature
    aggkey: bytes
    proof: MerkleProof

    @property
    def size(self) -> int:
        return musig.SIGNATURE_SIZE + len(self.aggkey) + self.proof.size

    def to_dict(self) -> Dict[str, str]:
        return {"sig": self.signature.to_bytes().hex(), "aggkey": self.aggkey.hex(), "proof": self.proof.to_bytes().hex()}

    @classmethod
    def from_dict(cls, d: Dict[str, str]) -> "MusigBundle":
        return cls(
            MultiSignature.from_bytes(bytes.fromhex(d["sig"])),
            bytes.fromhex(d["aggkey"]),
            MerkleProof.from_bytes(bytes.fromhex(d["proof"])),
        )


Auth = Union[bytes, MusigBundle]  # plain ECDSA signature or MuSig bundle


@dataclass
class PendingOp:
    kind: str  # "join" | "leave"
    address: bytes
    rid: int
    pubkey: Optional[Point] = None
    deposit: int = 0


def combination_root(pubkeys: Iterable[Union[Point, bytes]], zeta: Union[int, float, str]) -> bytes:
    keys = KeyList(pubkeys)
    return build_tree(musig.threshold_combinations(keys, zeta)).root


def join_payload(epoch: int, rid: int, pubkey: Point, deposit: int) -> bytes:
    return b"JOIN" + struct.pack(">QI", epoch, rid) + encode_point(pubkey) + deposit.to_bytes(32, "big")


def leave_payload(epoch: int, address: bytes) -> bytes:
    return b"LEAVE" + struct.pack(">Q", epoch) + address


@dataclass
class SettleOutcome:
    members_after: List[int]
    evicted: List[int]
    balances: Dict[int, int]
    rate: Fraction


class Ledger:
    """Contract state machine. Every successful mutation is logged."""

    def __init__(self, params: ContractParams):
        self.params = params
        self.clock = ChainClock(params.gamma)
        self.members: Dict[bytes, Member] = {}
        self.merkle_root = b""
        self.escrow = 0
        self.supply = 0
        self.prices: Dict[Tuple[int, int], int] = {}
        self.last_settle_block = 0
        self.epoch = 0
        self.pending: Optional[PendingOp] = None
        self.totals = {"deposits": 0, "buys": 0, "withdrawals": 0, "redemptions": 0}
        self.log: List[Dict[str, Any]] = []

    # construction

    @classmethod
    def deploy(cls, params: ContractParams, pubkey: Point, rid: int, deposit: int) -> "Ledger":
        return cls.genesis(params, [(pubkey, rid, deposit)])

    @classmethod
    def genesis(cls, params: ContractParams, founders: Sequence[Tuple[Point, int, int]]) -> "Ledger":
        """Deploy with an initial member set, each buying in at one token per ether."""
        if not founders:
            raise LedgerError("bad_params", "no founders")
        led = cls(params)
        for pubkey, rid, deposit in founders:
            if deposit < params.phi:
                raise LedgerError("deposit_below_phi")
            tokens = deposit // WEI_PER_SUBUNIT
            if tokens == 0:
                raise LedgerError("deposit_below_phi", "deposit buys no tokens")
            led._check_new_member(pubkey, rid)
            led.members[signing.address_of(pubkey)] = Member(signing.address_of(pubkey), pubkey, rid, tokens)
            led.escrow += deposit
            led.supply += tokens
            led.totals["deposits"] += deposit
        led.merkle_root = combination_root([m.pubkey for m in led.members.values()], params.zeta)
        led.last_settle_block = led.clock.height
        led.log.append({
            "op": "genesis", "params": params.to_dict(),
            "founders": [[encode_point(p).hex(), r, d] for p, r, d in founders],
        })
        return led

    def _check_new_member(self, pubkey: Point, rid: int) -> None:
        if signing.address_of(pubkey) in self.members or any(m.rid == rid for m in self.members.values()):
            raise LedgerError("duplicate_member")

    # reads

    @property
    def height(self) -> int:
        return self.clock.height

    def read_members(self) -> List[Member]:
        return sorted(self.members.values(), key=lambda m: m.rid)

    def member_by_rid(self, rid: int) -> Member:
        for m in self.members.values():
            if m.rid == rid:
                return m
        raise LedgerError("not_member", f"rid {rid}")

    def rate(self) -> Fraction:
        """Wei per subunit."""
        if self.supply == 0:
            return Fraction(WEI_PER_SUBUNIT)
        pending = self.pending.deposit if self.pending is not None else 0
        return Fraction(self.escrow - pending, self.supply)

    def ether_value(self, rid: int) -> Fraction:
        return self.member_by_rid(rid).tokens * self.rate()

    def price_view(self) -> PriceView:
        return PriceView(self.prices)

    def conservation_holds(self) -> bool:
        t = self.totals
        flows = t["deposits"] + t["buys"] - t["withdrawals"] - t["redemptions"]
        return self.escrow == flows and self.supply == sum(m.tokens for m in self.members.values())

    # clock

    def advance_block(self, k: int = 1) -> None:
        self.clock.advance(k)
        self.log.append({"op": "advance", "k": k})

    # authorization

    def verify_musig_call(self, payload: bytes, bundle: MusigBundle) -> bool:
        """Membership of the aggregated key in the current tree, then sigma."""
        if not verify_membership(self.merkle_root, bundle.aggkey, bundle.proof):
            return False
        return musig.verify(payload, bundle.aggkey, bundle.signature)

    def _authorize(self, payload: bytes, auth: Auth) -> None:
        if isinstance(auth, MusigBundle):
            ok = self.verify_musig_call(payload, auth)
        elif len(self.members) == 1:
            (only,) = self.members.values()
            ok = signing.verify(only.pubkey, payload, auth)
        else:
            ok = False
        if not ok:
            raise LedgerError("bad_auth")

    # membership

    def join(self, pubkey: Point, rid: int, deposit: int, auth: Auth) -> None:
        if deposit < self.params.phi:
            raise LedgerError("deposit_below_phi")
        if self.pending is not None:
            raise LedgerError("pending_occupied")
        self._check_new_member(pubkey, rid)
        self._authorize(join_payload(self.epoch, rid, pubkey, deposit), auth)
        self.pending = PendingOp("join", signing.address_of(pubkey), rid, pubkey, deposit)
        self.escrow += deposit
        self.totals["deposits"] += deposit
        self.log.append({"op": "join", "pubkey": encode_point(pubkey).hex(), "rid": rid, "deposit": deposit,
                         "auth": _auth_record(auth)})

    def leave(self, address: bytes, auth: Auth) -> None:
        if address not in self.members:
            raise LedgerError("not_member")
        if self.pending is not None:
            raise LedgerError("pending_occupied")
        if len(self.members) == 1:
            raise LedgerError("last_member")
        self._authorize(leave_payload(self.epoch, address), auth)
        self.pending = PendingOp("leave", address, self.members[address].rid)
        self.log.append({"op": "leave", "address": address.hex(), "auth": _auth_record(auth)})

    # functions without MuSig

    def register_link_price(self, address: bytes, neighbor: int, price: int) -> None:
        owner = self._member(address)
        if neighbor == owner.rid or not any(m.rid == neighbor for m in self.members.values()):
            raise LedgerError("bad_neighbor")
        if price < 0:
            raise LedgerError("bad_price")
        self.prices[(owner.rid, neighbor)] = price
        self.log.append({"op": "price", "address": address.hex(), "neighbor": neighbor, "price": price})

    def buy_tokens(self, address: bytes, wei: int) -> int:
        member = self._member(address)
        if wei <= 0:
            raise LedgerError("bad_amount")
        tokens = int(wei / self.rate())
        member.tokens += tokens
        self.supply += tokens
        self.escrow += wei
        self.totals["buys"] += wei
        self.log.append({"op": "buy", "address": address.hex(), "wei": wei})
        return tokens

    def redeem_tokens(self, address: bytes, tokens: int) -> int:
        member = self._member(address)
        if not 0 < tokens <= member.tokens:
            raise LedgerError("insufficient_balance")
        wei = int(tokens * self.rate())
        member.tokens -= tokens
        self.supply -= tokens
        self.escrow -= wei
        self.totals["redemptions"] += wei
        self.log.append({"op": "redeem", "address": address.hex(), "tokens": tokens})
        return wei

    def _member(self, address: bytes) -> Member:
        member = self.members.get(address)
        if member is None:
            raise LedgerError("not_member")
        return member

    # settlement

    def check_settle_preconditions(self, stp: Stp) -> None:
        if stp.cycle_id != self.epoch:
            raise LedgerError("epoch", f"expected {self.epoch}, got {stp.cycle_id}")
        if self.height - self.last_settle_block < self.params.beta:
            raise LedgerError("early")
        anchor_height = self.clock.height_of(stp.anchor)
        if anchor_height is None or anchor_height < self.last_settle_block:
            raise LedgerError("unknown_anchor")
        if self.height - anchor_height > self.params.xi:
            raise LedgerError("expired")
        if not any(m.rid == stp.proposer for m in self.members.values()):
            raise LedgerError("proposer")
        if stp.reward != self.params.reward:
            raise LedgerError("reward")
        if [rid for rid, _ in stp.entries] != sorted(m.rid for m in self.members.values()):
            raise LedgerError("entry_set")

    def settle(self, stp: Stp, bundle: MusigBundle, new_root: bytes) -> SettleOutcome:
        self.check_settle_preconditions(stp)
        if not self.verify_musig_call(stp.to_bytes(), bundle):
            raise LedgerError("bad_musig")
        if new_root != stp.next_root:
            raise LedgerError("root_mismatch")
        outcome = self._apply_settle(stp.entry_map, stp.proposer)
        self.merkle_root = new_root
        self.log.append({"op": "settle", "stp": stp.to_bytes().hex(), "auth": bundle.to_dict(),
                         "root": new_root.hex()})
        return outcome

    def preview_settle(self, entries: Dict[int, int], proposer: int) -> SettleOutcome:
        """Dry run of a settle's balance and membership effects."""
        shadow = copy.copy(self)
        shadow.members = {a: replace(m) for a, m in self.members.items()}
        shadow.pending = replace(self.pending) if self.pending is not None else None
        shadow.totals = dict(self.totals)
        shadow.log = []
        return shadow._apply_settle(entries, proposer)

    def _apply_settle(self, entries: Dict[int, int], proposer: int) -> SettleOutcome:
        by_rid = {m.rid: m for m in self.members.values()}
        if set(entries) != set(by_rid):
            raise LedgerError("entry_set")
        for rid, c in entries.items():
            if by_rid[rid].tokens + c + (self.params.reward if rid == proposer else 0) < 0:
                raise LedgerError("insolvent", f"rid {rid}")
        for rid, c in entries.items():
            by_rid[rid].tokens += c
            self.supply += c
        by_rid[proposer].tokens += self.params.reward
        self.supply += self.params.reward
        op, self.pending = self.pending, None
        if op is not None and op.kind == "join":
            assert op.pubkey is not None
            minted = int(op.deposit / Fraction(self.escrow - op.deposit, self.supply)) if self.supply else 0
            self.members[op.address] = Member(op.address, op.pubkey, op.rid, minted)
            self.supply += minted
        elif op is not None and op.kind == "leave":
            self._pay_out(op.address, self.rate())
        evicted = []
        rate = self.rate()
        for m in self.read_members():
            if m.tokens * rate < self.params.tau and len(self.members) > 1:
                evicted.append(m.rid)
                self._pay_out(m.address, rate)
        self.epoch += 1
        self.last_settle_block = self.height
        return SettleOutcome(
            [m.rid for m in self.read_members()], evicted, {m.rid: m.tokens for m in self.read_members()}, self.rate()
        )

    def _pay_out(self, address: bytes, rate: Fraction) -> None:
        member = self.members.pop(address)
        wei = int(member.tokens * rate)
        self.supply -= member.tokens
        self.escrow -= wei
        self.totals["withdrawals"] += wei

    # serialization

    def snapshot(self) -> str:
        """Canonical JSON of the full state."""
        state = {
            "params": self.params.to_dict(),
            "height": self.height,
            "head": self.clock.hash.hex(),
            "epoch": self.epoch,
            "last_settle_block": self.last_settle_block,
            "root": self.merkle_root.hex(),
            "escrow": self.escrow,
            "supply": self.supply,
            "members": [
                {"rid": m.rid, "address": m.address.hex(), "pubkey": m.encoded_key.hex(), "tokens": m.tokens}
                for m in self.read_members()
            ],
            "prices": [[a, b, p] for (a, b), p in sorted(self.prices.items())],
            "pending": None if self.pending is None else {
                "kind": self.pending.kind, "address": self.pending.address.hex(), "rid": self.pending.rid,
                "deposit": self.pending.deposit,
            },
            "totals": self.totals,
        }
        return json.dumps(state, sort_keys=True, separators=(",", ":"))

    def log_lines(self) -> List[str]:
        return [json.dumps(rec, sort_keys=True) for rec in self.log]

    @classmethod
    def replay(cls, lines: Iterable[str]) -> "Ledger":
        led: Optional[Ledger] = None
        for line in lines:
            if not line.strip():
                continue
            rec = json.loads(line)
            op = rec["op"]
            if op == "genesis":
                params = ContractParams.from_dict(rec["params"])
                led = cls.genesis(params, [(decode_point(bytes.fromhex(k)), r, d) for k, r, d in rec["founders"]])
                continue
            if led is None:
                raise LedgerError("bad_log", "log does not start with genesis")
            if op == "advance":
                led.advance_block(rec["k"])
            elif op == "join":
                led.join(decode_point(bytes.fromhex(rec["pubkey"])), rec["rid"], rec["deposit"],
                         _auth_from_record(rec["auth"]))
            elif op == "leave":
                led.leave(bytes.fromhex(rec["address"]), _auth_from_record(rec["auth"]))
            elif op == "price":
                led.register_link_price(bytes.fromhex(rec["address"]), rec["neighbor"], rec["price"])
            elif op == "buy":
                led.buy_tokens(bytes.fromhex(rec["address"]), rec["wei"])
            elif op == "redeem":
                led.redeem_tokens(bytes.fromhex(rec["address"]), rec["tokens"])
            elif op == "settle":
                led.settle(Stp.from_bytes(bytes.fromhex(rec["stp"])), MusigBundle.from_dict(rec["auth"]),
                           bytes.fromhex(rec["root"]))
            else:
                raise LedgerError("bad_log", f"unknown op {op!r}")
        if led is None:
            raise LedgerError("bad_log", "empty log")
        return led


def _auth_record(auth: Auth) -> Any:
    return auth.to_dict() if isinstance(auth, MusigBundle) else auth.hex()


def _auth_from_record(rec: Any) -> Auth:
    return MusigBundle.from_dict(rec) if isinstance(rec, dict) else bytes.fromhex(rec)


def sign_bundle(
    payload: bytes,
    signers: Sequence[musig.KeyPair],
    members: Sequence[Union[Point, bytes]],
    zeta: Union[int, float, str],
    *,
    nonce_source: Optional[musig.NonceSource] = None,
) -> MusigBundle:
    """Run MuSig among ``signers`` and attach the proof against the tree
    built over ``members``. Convenience for tests and the simulator."""
    tree = build_tree(musig.threshold_combinations(KeyList(members), zeta))
    sig, agg = musig.run_session(payload, signers, nonce_source=nonce_source)
    return MusigBundle(sig, agg.encoded, prove_membership(tree, agg))
