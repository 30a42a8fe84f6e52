"""The simulation loop: traffic, reports, STPs, MuSig and settlement."""

from __future__ import annotations

import hashlib
import logging
import random
from collections import deque
from typing import Callable, Dict, FrozenSet, List, Optional, Set, Tuple

from harpia import dpifa
from harpia.dpifa import AggregatedCounters, CycleStore, DpifaReport, Violation, aggregate, audit, infer_topology
from harpia.ledger import Ledger, LedgerError, MusigBundle, combination_root
from harpia.merkle import CombinationMerkleTree, build_tree, prove_membership
from harpia.musig import KeyList, KeyPair, MuSigSession, aggregate_key, threshold_combinations
from harpia.netsim.bus import Bus, EventQueue
from harpia.netsim.config import SimConfig, StpCheater
from harpia.netsim.metrics import CycleSummary, Metrics, RouterRow
from harpia.netsim.router import RouterAgent
from harpia.secp256k1 import N, Point
from harpia.settlement import (
    CONFIRMATION_SIZE,
    ConfirmationSet,
    DisconnectedTopologyError,
    MissingPriceError,
    Stp,
    compute_entries,
    confirm_stp,
    sign_stp,
    threshold_met,
    validate_stp,
)
from harpia.signing import address_of

log = logging.getLogger(__name__)

REQUEST_SIZE = 12  # rid, nid, seq of a missing report
RETRY_SIZE = dpifa.REPORT_SIZE + dpifa.EXTENSION_SIZE


def derive_keypair(seed: int, rid: int) -> KeyPair:
    digest = hashlib.sha256(f"harpia-sim:{seed}:{rid}".encode()).digest()
    return KeyPair.from_secret(int.from_bytes(digest, "big") % (N - 1) + 1)


def shortest_path(adj: Dict[int, Set[int]], src: int, dst: int) -> Optional[List[int]]:
    """BFS path; neighbors are explored in ascending id order."""
    parent = {src: src}
    queue = deque([src])
    while queue:
        u = queue.popleft()
        if u == dst:
            path = [u]
            while u != src:
                u = parent[u]
                path.append(u)
            return path[::-1]
        for v in sorted(adj.get(u, ())):
            if v not in parent:
                parent[v] = u
                queue.append(v)
    return None


class _CycleView:
    """What one router derives from its report store at the end of a cycle."""

    def __init__(self, agg: AggregatedCounters, violations: List[Violation],
                 entries: Optional[Dict[int, int]], failure: Optional[str]):
        self.agg = agg
        self.violations = violations
        self.entries = entries
        self.failure = failure


class Simulation:
    def __init__(self, config: SimConfig, report_sink: Optional[Callable[[int, CycleStore], None]] = None):
        self.cfg = config
        self.report_sink = report_sink  # sees one router's final store each cycle
        params = config.params
        self.periods = config.periods_per_cycle
        self.cycle_seconds = params.beta * params.gamma
        self.adj: Dict[int, Set[int]] = {r: set(v) for r, v in config.adjacency().items()}
        self.agents: Dict[int, RouterAgent] = {
            rid: RouterAgent(rid, derive_keypair(config.seed, rid), config.behavior(rid), sorted(self.adj[rid]),
                             params.lam, config.seed)
            for rid in config.routers
        }
        self.ledger = Ledger.genesis(params, [(a.public, rid, config.deposit(rid)) for rid, a in self.agents.items()])
        for a, b, price in config.links:
            self.ledger.register_link_price(address_of(self.agents[a].public), b, price)
            self.ledger.register_link_price(address_of(self.agents[b].public), a, price)
        self.bus = Bus(config.loss_prob, random.Random(f"{config.seed}:loss"))
        self.queue = EventQueue()
        self.metrics = Metrics(config.seed)
        self._trees: Dict[FrozenSet[int], CombinationMerkleTree] = {}
        self._roots: Dict[FrozenSet[int], bytes] = {}
        self._routes: Optional[Dict[Tuple[int, int], Optional[List[int]]]] = None
        self._verified: Dict[int, Tuple[DpifaReport, bool]] = {}
        self._sent: Dict[Tuple[int, int], int] = {}
        self._delivered: Dict[Tuple[int, int], int] = {}

    # public entry point

    def run(self) -> Metrics:
        if self.cfg.cycles:
            self.queue.schedule(0, self._begin_cycle, 0)
        self.queue.run()
        return self.metrics

    # helpers

    def _advance_to(self, height: int) -> None:
        if height > self.ledger.height:
            self.ledger.advance_block(height - self.ledger.height)

    def _verify(self, report: DpifaReport, pubkey: Point) -> bool:
        # every receiver checks the same report object; verify it once
        hit = self._verified.get(id(report))
        if hit is not None and hit[0] is report:
            return hit[1]
        ok = dpifa.verify_report(report, pubkey)
        self._verified[id(report)] = (report, ok)
        return ok

    def _tree(self, members: FrozenSet[int]) -> CombinationMerkleTree:
        tree = self._trees.get(members)
        if tree is None:
            keys = KeyList([self.agents[r].public for r in members])
            tree = build_tree(threshold_combinations(keys, self.cfg.params.zeta))
            self._trees[members] = tree
            self._roots[members] = tree.root
        return tree

    def _root(self, members: FrozenSet[int]) -> bytes:
        root = self._roots.get(members)
        if root is None:
            root = combination_root([self.agents[r].public for r in members], self.cfg.params.zeta)
            self._roots[members] = root
        return root

    def _route(self, src: int, dst: int) -> Optional[List[int]]:
        if self._routes is None:
            self._routes = {}
        key = (src, dst)
        if key not in self._routes:
            self._routes[key] = shortest_path(self.adj, src, dst)
        return self._routes[key]

    # events

    def _begin_cycle(self, c: int) -> None:
        params = self.cfg.params
        self._verified = {}
        self._sent = {}
        self._delivered = {}
        directory = {rid: a.public for rid, a in self.agents.items()}
        seqs = range(c * self.periods, (c + 1) * self.periods)
        window = (c * self.cycle_seconds + 1, (c + 1) * self.cycle_seconds + 1)
        for agent in self.agents.values():
            agent.begin_cycle(c, seqs, window, directory, self._verify)
        start = c * params.beta
        for p in range(self.periods):
            height = start + -(-((p + 1) * params.lam) // params.gamma)
            self.queue.schedule(height, self._end_period, c, p)
        self.queue.schedule(start + params.beta, self._end_cycle, c)
        log.debug("cycle %d begins with %d members", c, len(self.agents))

    def _end_period(self, c: int, p: int) -> None:
        params = self.cfg.params
        self._advance_to(c * params.beta + -(-((p + 1) * params.lam) // params.gamma))
        t = c * self.cycle_seconds + (p + 1) * params.lam
        for flow in self.cfg.flows:
            if flow.src in self.agents and flow.dst in self.agents:
                key = (flow.src, flow.dst)
                self._sent[key] = self._sent.get(key, 0) + flow.bytes_per_period
                path = self._route(flow.src, flow.dst)
                if path is not None:
                    self._delivered[key] = self._delivered.get(key, 0) + self._walk(flow, path)
        stores = [(rid, a.store) for rid, a in sorted(self.agents.items())]
        lossy = self.bus.loss_prob > 0
        for rid, agent in sorted(self.agents.items()):
            for report in agent.emit(c, c * self.periods + p, t):
                self.bus.emit("dpifa", dpifa.REPORT_SIZE)
                self.bus.emit("dpifa_ext", dpifa.EXTENSION_SIZE)
                for other, store in stores:
                    if other == rid or not lossy or self.bus.delivered():
                        store.ingest(report)

    def _walk(self, flow, path: List[int]) -> int:
        packets, nbytes = flow.packets_per_period, flow.bytes_per_period
        source = self.agents[flow.src].source_address()
        for i in range(len(path) - 1):
            a, b = path[i], path[i + 1]
            if i > 0:
                packets, nbytes = self.agents[a].transit_filter(packets, nbytes)
                if packets == 0:
                    return 0
            self.agents[a].send(b, packets, nbytes, originated=(i == 0))
            self.agents[b].receive(a, packets, nbytes, source, terminated=(b == flow.dst))
        return nbytes

    def _rerequest(self, expected: List[Tuple[int, int]]) -> None:
        """Ask originators directly for missing reports, ``retry_rounds`` times at most."""
        for rid, agent in sorted(self.agents.items()):
            for _ in range(self.cfg.retry_rounds):
                missing = agent.store.missing(expected)
                if not missing:
                    break
                self._request(agent, missing)

    def _request(self, agent: RouterAgent, missing: List[Tuple[int, int, int]]) -> None:
        for key in missing:
            self.bus.emit("dpifa_retry", REQUEST_SIZE)
            origin = self.agents.get(key[0])
            report = origin.emitted.get(key) if origin is not None else None
            if report is None or not self.bus.delivered():
                continue
            self.bus.emit("dpifa_retry", RETRY_SIZE)
            if self.bus.delivered():
                agent.store.ingest(report)

    def _views(self, expected: List[Tuple[int, int]], members: List[int]) -> Dict[int, _CycleView]:
        """Aggregate, audit and price each router's store; identical stores share the work."""
        prices = self.ledger.price_view()
        registered = prices.links()
        cache: Dict[FrozenSet[int], _CycleView] = {}
        views = {}
        for rid, agent in sorted(self.agents.items()):
            fingerprint = frozenset(id(r) for r in agent.store.reports.values())
            view = cache.get(fingerprint)
            if view is None:
                agg = aggregate(agent.store, expected).without_incomplete()
                violations = audit(agg)
                topology = infer_topology(agg, registered, members)
                try:
                    entries: Optional[Dict[int, int]] = compute_entries(agg, prices, topology, members)
                    failure = None
                except DisconnectedTopologyError:
                    entries, failure = None, "disconnected"
                except MissingPriceError:
                    entries, failure = None, "missing_price"
                view = cache[fingerprint] = _CycleView(agg, violations, entries, failure)
            views[rid] = view
        return views

    def _musig(self, message: bytes, signers: List[int], members: FrozenSet[int]) -> MusigBundle:
        tree = self._tree(members)
        cosigners = KeyList([self.agents[r].public for r in signers])
        aggkey = aggregate_key(cosigners)
        sessions = [
            MuSigSession(message, cosigners, self.agents[r].keypair, aggkey=aggkey,
                         nonce_source=self.agents[r].musig_nonce)
            for r in signers
        ]
        commitments = {}
        for s in sessions:
            commitments[s.own_id] = s.commit()
            self.bus.emit("musig", 32)
        nonces = {}
        for s in sessions:
            nonces[s.own_id] = s.reveal(commitments)
            self.bus.emit("musig", 33)
        partials = {}
        for s in sessions:
            partials[s.own_id] = s.partial_sign(nonces)
            self.bus.emit("musig", 32)
        sig = sessions[0].combine(partials)
        return MusigBundle(sig, aggkey.encoded, prove_membership(tree, aggkey))

    def _end_cycle(self, c: int) -> None:
        params = self.cfg.params
        self._advance_to((c + 1) * params.beta)
        led = self.ledger
        members = sorted(self.agents)
        member_set = frozenset(members)
        expected = [(a, b) for a in members for b in sorted(self.adj[a])]
        self._rerequest(expected)
        if self.report_sink is not None:
            self.report_sink(c, self.agents[members[0]].store)
        views = self._views(expected, members)
        summary = CycleSummary(cycle=c)

        seen: Set[Violation] = set()
        for view in views.values():
            seen.update(view.violations)
        summary.violations = [
            {"criterion": v.criterion, "router": v.router, "neighbor": v.neighbor, "unit": v.unit,
             "left": v.left, "right": v.right}
            for v in sorted(seen, key=lambda v: (v.criterion, v.router, v.neighbor if v.neighbor is not None else -1, v.unit))
        ]
        excluded: Set[FrozenSet[int]] = set()
        for view in views.values():
            excluded |= view.agg.excluded
        summary.excluded_links = sorted(sorted(link) for link in excluded)
        rejected: Dict[str, int] = {}
        for agent in self.agents.values():
            for reason, count in agent.store.rejected.items():
                rejected[reason.value] = rejected.get(reason.value, 0) + count
        summary.reports_rejected = dict(sorted(rejected.items()))

        # proposals and acknowledgements
        pool = [r for r in (self.cfg.proposers or self.cfg.routers) if r in self.agents]
        order = pool[c % len(pool):] + pool[: c % len(pool)] if pool else []
        low = max(led.last_settle_block, led.height - params.xi)
        anchors = set(led.clock.hashes[low: led.height + 1])
        previews: Dict[Tuple[int, Tuple[Tuple[int, int], ...]], Optional[bytes]] = {}

        def expected_root(stp: Stp) -> Optional[bytes]:
            key = (stp.proposer, stp.entries)
            if key not in previews:
                try:
                    after = led.preview_settle(stp.entry_map, stp.proposer).members_after
                    previews[key] = self._root(frozenset(after))
                except LedgerError:
                    previews[key] = None
            return previews[key]

        proposals: List[Tuple[int, Stp, ConfirmationSet]] = []
        for p in order:
            agent = self.agents[p]
            view = views[p]
            if view.entries is None:
                summary.proposal_failures[str(p)] = view.failure or "no_entries"
                continue
            entries = dict(view.entries)
            if isinstance(agent.behavior, StpCheater):
                entries[p] += agent.behavior.inflate_self_by
            try:
                after = led.preview_settle(entries, p).members_after
            except LedgerError as exc:
                summary.proposal_failures[str(p)] = exc.reason
                continue
            stp = sign_stp(agent.signer, p, led.epoch, led.clock.hash, self._root(frozenset(after)), entries,
                           params.reward, led.clock.time & 0xFFFFFFFF, agent.stp_rng.getrandbits(32))
            self.bus.emit("stp", len(stp.to_bytes()))
            confirmations = ConfirmationSet(stp.digest())
            for v in members:
                if v == p or views[v].entries is None:
                    continue
                root = expected_root(stp)
                if root is None:
                    continue
                verdict = validate_stp(views[v].entries, stp, params.delta, reward=params.reward,
                                       cycle_id=led.epoch, anchors=anchors, proposer_key=agent.public,
                                       next_root=root)
                if verdict:
                    conf = confirm_stp(self.agents[v].signer, v, stp)
                    self.bus.emit("confirmation", CONFIRMATION_SIZE)
                    confirmations.add(conf, self.agents[v].public)
            summary.confirmations[str(p)] = confirmations.confirmers
            proposals.append((p, stp, confirmations))

        # MuSig and settlement; the first accepted settle wins the cycle
        applied: Dict[int, int] = {}
        evicted: List[int] = []
        for p, stp, confirmations in proposals:
            signers = sorted(set(confirmations.confirmers) | {p})
            if not threshold_met(signers, params.zeta, len(members)):
                summary.rejections.append([p, "threshold"])
                continue
            self.bus.emit("announcement", len(confirmations.announcement(self.agents[p].signer)))
            bundle = self._musig(stp.to_bytes(), signers, member_set)
            try:
                outcome = led.settle(stp, bundle, stp.next_root)
            except LedgerError as exc:
                summary.rejections.append([p, exc.reason])
                continue
            summary.settled_by = p
            applied = stp.entry_map
            evicted = outcome.evicted
            break
        if summary.settled_by is None:
            if not proposals:
                summary.skipped = ",".join(sorted(set(summary.proposal_failures.values()))) or "no_proposer"
            else:
                summary.skipped = "no_settle"
            log.info("cycle %d: no settle (%s)", c, summary.skipped)

        for rid in evicted:
            self._evict(rid)
        summary.evicted = evicted
        summary.members = sorted(self.agents)
        summary.entries_sum = sum(applied.values())
        summary.supply = led.supply
        summary.escrow = led.escrow
        summary.bytes = self.bus.snapshot()
        self.bus.reset()
        summary.delivery = {
            f"{s}->{d}": round(self._delivered.get((s, d), 0) / sent, 6) if sent else 1.0
            for (s, d), sent in sorted(self._sent.items())
        }
        rate = led.rate()
        members_now = {m.rid: m for m in led.read_members()}
        implicated: Dict[Tuple[int, str], int] = {}
        for v in seen:
            implicated[(v.router, v.criterion)] = implicated.get((v.router, v.criterion), 0) + 1
        for rid in self.cfg.routers:
            m = members_now.get(rid)
            tokens = m.tokens if m is not None else 0
            self.metrics.rows.append(RouterRow(
                cycle=c, rid=rid, member=m is not None, tokens=tokens, ether_wei=int(tokens * rate),
                entry=applied.get(rid), reward=params.reward if rid == summary.settled_by else 0,
                evicted=rid in evicted,
                violations_symmetry=implicated.get((rid, "symmetry"), 0),
                violations_conservation=implicated.get((rid, "conservation"), 0),
                violations_ofn=implicated.get((rid, "ofn"), 0),
            ))
        self.metrics.cycles.append(summary)
        if c + 1 < self.cfg.cycles:
            # queued behind everything at this height, so cycle c is fully closed first
            self.queue.schedule(led.height, self._begin_cycle, c + 1)

    def _evict(self, rid: int) -> None:
        self.agents.pop(rid, None)
        for nbr in self.adj.pop(rid, set()):
            self.adj[nbr].discard(rid)
            if nbr in self.agents:
                self.agents[nbr].drop_neighbor(rid)
        self._routes = None
        log.info("router %d evicted", rid)


def run(config: SimConfig, report_sink: Optional[Callable[[int, CycleStore], None]] = None) -> Metrics:
    return Simulation(config, report_sink).run()
