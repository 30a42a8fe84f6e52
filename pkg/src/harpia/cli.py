"""Command-line entry point.

Exit codes: 0 success, 1 validation failure, 2 usage or configuration error.
Set ``HARPIA_LOG`` (e.g. ``INFO`` or ``DEBUG``) to see progress logs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from harpia import costmodel, dpifa, musig
from harpia.dpifa import CycleStore
from harpia.merkle import build_tree, prove_membership, verify_membership
from harpia.secp256k1 import N, encode_point
from harpia.netsim import ConfigError, load_scenario, run

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_USAGE = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _setup_logging() -> None:
    level = os.environ.get("HARPIA_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


# simulate


def cmd_simulate(args: argparse.Namespace) -> int:
    try:
        config = load_scenario(args.scenario)
        if args.seed is not None:
            config = replace(config, seed=args.seed)
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out = Path(args.out)

    def dump(cycle: int, store: CycleStore) -> None:
        lines = dpifa.export_records(store.reports.values(), store.directory, cycle=cycle,
                                     seqs=store.seqs, window=store.window)
        (out / f"reports-cycle{cycle}.ndjson").write_text("\n".join(lines) + "\n")

    if args.dump_reports:
        out.mkdir(parents=True, exist_ok=True)
    metrics = run(config, report_sink=dump if args.dump_reports else None)
    metrics.write(out)
    if args.format == "json":
        print(metrics.to_json())
    else:
        totals = metrics.bytes_total()
        print(f"cycles: {len(metrics.cycles)}  settles: {metrics.settles}  seed: {metrics.seed}")
        for c in metrics.cycles:
            status = f"settled by {c.settled_by}" if c.settled_by is not None else f"skipped ({c.skipped})"
            extra = f"  evicted {c.evicted}" if c.evicted else ""
            print(f"  cycle {c.cycle}: {status}, {len(c.violations)} violations{extra}")
        print("bytes: " + ", ".join(f"{k}={v}" for k, v in totals.items()))
        print("final tokens: " + ", ".join(f"{r}={t / 10**9:g}" for r, t in sorted(metrics.final_tokens().items())))
        print(f"wrote {out / 'metrics.csv'} and {out / 'summary.json'}")
    return EXIT_OK


# validate-reports


def cmd_validate_reports(args: argparse.Namespace) -> int:
    try:
        with open(args.dump) as fh:
            store, rejected = dpifa.import_records(fh)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    for index, report, reason in rejected:
        print(f"rejected report #{index} rid={report.rid} nid={report.nid} seq={report.seq}: {reason.value}")
    agg = dpifa.aggregate(store)
    for rid, nid, seq in agg.missing:
        print(f"missing report rid={rid} nid={nid} seq={seq}")
    agg = agg.without_incomplete()
    violations = dpifa.audit(agg)
    by_criterion = {c: [v for v in violations if v.criterion == c] for c in ("symmetry", "conservation", "ofn")}
    for criterion, found in by_criterion.items():
        print(f"{criterion}: {len(found)} violation(s)")
        for v in found:
            link = f"{v.router}->{v.neighbor}" if v.neighbor is not None else f"{v.router}"
            print(f"  {link} {v.unit}: {v.left} != {v.right}")
    print(f"{len(store)} reports accepted, {len(rejected)} rejected, {len(agg.excluded)} link(s) excluded")
    return EXIT_INVALID if violations or rejected else EXIT_OK


# cost-estimate


def cmd_cost_estimate(args: argparse.Namespace) -> int:
    try:
        inputs = costmodel.CostInputs(n=args.n, zeta=args.zeta, nu=args.nu, lam=args.lam, cycle_seconds=args.cycle)
        result = costmodel.estimate(inputs)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.format == "json":
        print(json.dumps(result, indent=2))
        return EXIT_OK
    width = max(len(k) for k in result)
    for key, value in result.items():
        if key.endswith("_bytes"):
            print(f"{key:<{width}}  {value:>14,}  ({costmodel.format_mib(value)})")
        else:
            print(f"{key:<{width}}  {value:>14}")
    return EXIT_OK


# musig-demo


def _demo_key(seed: int, i: int) -> musig.KeyPair:
    digest = hashlib.sha256(f"harpia-demo:{seed}:{i}".encode()).digest()
    return musig.KeyPair.from_secret(int.from_bytes(digest, "big") % (N - 1) + 1)


def cmd_musig_demo(args: argparse.Namespace) -> int:
    try:
        m = musig.threshold_m(args.n, args.zeta)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.n < 1 or args.n > 16:
        print("error: n must lie in [1, 16] for the demo", file=sys.stderr)
        return EXIT_USAGE
    keys = [_demo_key(args.seed, i) for i in range(args.n)]
    members = musig.KeyList(keys)
    combos = musig.threshold_combinations(members, args.zeta)
    tree = build_tree(combos)
    print(f"members n={args.n}, zeta={args.zeta}: m={m}, {len(combos)} combinations, root {tree.root.hex()}")
    signers = keys[:m]
    cosigners = musig.KeyList(signers)
    aggkey = musig.aggregate_key(cosigners)
    print(f"signers: {m} keys, aggregated key {aggkey.encoded.hex()}")
    counter = iter(range(1, 1 << 30))

    def nonces() -> int:
        # deterministic per demo seed so transcripts are reproducible
        digest = hashlib.sha256(f"harpia-demo-nonce:{args.seed}:{next(counter)}".encode()).digest()
        return int.from_bytes(digest, "big") % (N - 1) + 1

    message = args.message.encode()
    sessions = [musig.MuSigSession(message, cosigners, kp, aggkey=aggkey, nonce_source=nonces) for kp in signers]
    commitments = {s.own_id: s.commit() for s in sessions}
    print("round 1: commitments")
    for key, com in commitments.items():
        print(f"  {key.hex()[:16]}  t={com.hex()}")
    revealed = {s.own_id: s.reveal(commitments) for s in sessions}
    print("round 2: nonces")
    for key, point in revealed.items():
        print(f"  {key.hex()[:16]}  R={encode_point(point).hex()}")
    partials = {s.own_id: s.partial_sign(revealed) for s in sessions}
    print("round 3: partial signatures")
    for key, s_i in partials.items():
        print(f"  {key.hex()[:16]}  s={s_i:064x}")
    sig = sessions[0].combine(partials)
    proof = prove_membership(tree, aggkey)
    sig_ok = musig.verify(message, aggkey, sig)
    proof_ok = verify_membership(tree.root, aggkey, proof)
    print(f"signature: R={encode_point(sig.nonce_point).hex()} s={sig.scalar_sum:064x}")
    print(f"merkle proof: leaf {proof.leaf_index}, {len(proof.path)} siblings")
    print(f"verify: signature {'ok' if sig_ok else 'FAILED'}, membership {'ok' if proof_ok else 'FAILED'}")
    return EXIT_OK if sig_ok and proof_ok else EXIT_INVALID


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="harpia", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="run a scenario file and write metrics")
    p.add_argument("--scenario", required=True)
    p.add_argument("--out", default="out")
    p.add_argument("--seed", type=int, help="override the scenario seed")
    p.add_argument("--format", choices=["text", "json"], default="text")
    p.add_argument("--dump-reports", action="store_true", help="write one router's report store per cycle")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("validate-reports", help="audit an NDJSON report dump")
    p.add_argument("dump")
    p.set_defaults(func=cmd_validate_reports)

    p = sub.add_parser("cost-estimate", help="closed-form storage and traffic estimates")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--zeta", default="75")
    p.add_argument("--nu", type=int, default=5)
    p.add_argument("--lambda", dest="lam", type=int, default=600, help="report period in seconds")
    p.add_argument("--cycle", type=int, default=86400, help="cycle length in seconds")
    p.add_argument("--format", choices=["text", "json"], default="text")
    p.set_defaults(func=cmd_cost_estimate)

    p = sub.add_parser("musig-demo", help="print a round-by-round MuSig transcript")
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--zeta", default="75")
    p.add_argument("--message", default="hello")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_musig_demo)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
