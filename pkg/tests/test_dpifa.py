import json
import random

import pytest
from hypothesis import given, settings, strategies as st

from harpia import dpifa
from harpia.dpifa import (
    FIELDS,
    AggregatedCounters,
    CycleStore,
    DpifaReport,
    LinkCounters,
    PacketEvent,
    RejectReason,
    RouterAccounting,
    Tally,
    account,
    aggregate,
    audit,
    check_conservation,
    check_ofn,
    check_symmetry,
    emit_reports,
    infer_topology,
    sign_report,
    verify_report,
)
from harpia.signing import Signer
from walks import counters_from_walks, square_agg


def signers(count):
    return [Signer(1000 + i) for i in range(count)]


def test_account_terminating_from_neighbor():
    c = account(LinkCounters(), PacketEvent("in", 7, 100, terminated_here=True, source=7))
    assert c.input == c.terminated == c.ofn == Tally(1, 100)
    assert c.output == c.started == Tally()


def test_account_originated_output():
    c = account(LinkCounters(), PacketEvent("out", 7, 60, originated_here=True))
    assert c.output == c.started == Tally(1, 60)
    assert c.input == Tally()


def test_account_transit_input():
    c = account(LinkCounters(), PacketEvent("in", 7, 80, source=3))
    assert c.input == Tally(1, 80)
    assert c.terminated == c.ofn == Tally()


def test_account_rejects_unknown_direction():
    with pytest.raises(ValueError):
        account(LinkCounters(), PacketEvent("sideways", 1, 1))


events = st.builds(
    PacketEvent,
    direction=st.sampled_from(["in", "out"]),
    neighbor=st.just(1),
    size=st.integers(0, 1500),
    originated_here=st.booleans(),
    terminated_here=st.booleans(),
    source=st.sampled_from([None, 1, 2]),
    packets=st.integers(1, 5),
)


@settings(max_examples=200)
@given(st.lists(events, max_size=40))
def test_accounting_identity_holds_for_any_event_stream(stream):
    c = LinkCounters()
    prev = c.as_tuple()
    for ev in stream:
        account(c, ev)
        assert c.is_consistent()
        assert all(a <= b for a, b in zip(prev, c.as_tuple()))
        prev = c.as_tuple()


def test_wire_layout_sizes():
    s = Signer(99)
    r = sign_report(s, 1, 2, 0, 3, LinkCounters.from_tuple(range(1, 11)), 1234, 77)
    wire = r.to_wire()
    assert len(wire) == 116 == dpifa.REPORT_SIZE
    assert len(r.extension()) == 40
    assert wire[4:8] == (1).to_bytes(4, "big") and wire[8:12] == (2).to_bytes(4, "big")
    assert wire[20:40] == b"".join(i.to_bytes(4, "big") for i in range(1, 6))
    back = DpifaReport.from_wire(wire, r.extension())
    assert back == r
    assert verify_report(back, s.public)


def test_wire_rejects_mismatched_extension():
    r = sign_report(Signer(5), 1, 2, 0, 0, LinkCounters.from_tuple(range(10)), 1, 1)
    other = sign_report(Signer(5), 1, 2, 0, 0, LinkCounters.from_tuple([0] * 10), 1, 1).extension()
    with pytest.raises(ValueError):
        DpifaReport.from_wire(r.to_wire(), other)
    with pytest.raises(ValueError):
        DpifaReport.from_wire(r.to_wire()[:-1], r.extension())


def test_signature_covers_byte_counters():
    s = Signer(5)
    r = sign_report(s, 1, 2, 0, 0, LinkCounters.from_tuple(range(10)), 1, 1)
    values = list(r.values)
    values[7] += 1
    forged = DpifaReport(r.rid, r.nid, r.cycle, r.seq, tuple(values), r.timestamp, r.nonce, r.signature)
    assert not verify_report(forged, s.public)


def test_self_link_report_refused():
    with pytest.raises(ValueError):
        sign_report(Signer(5), 3, 3, 0, 0, LinkCounters(), 1, 1)


def test_emit_one_report_per_neighbor_and_reset():
    s = Signer(11)
    state = RouterAccounting(1, s, [0, 2], period=600)
    state.record(PacketEvent("out", 2, 500, originated_here=True, packets=5))
    nonces = iter(range(100))
    reports = emit_reports(state, 0, cycle=0, timestamp=600, nonce_source=lambda: next(nonces))
    assert [(r.rid, r.nid) for r in reports] == [(1, 0), (1, 2)]
    assert reports[1].counters.output == Tally(5, 500)
    assert state.current[2] == LinkCounters()
    assert len({r.nonce for r in reports}) == 2
    with pytest.raises(ValueError):
        emit_reports(state, 1, cycle=0, timestamp=900, nonce_source=lambda: next(nonces))
    second = emit_reports(state, 1, cycle=0, timestamp=1200, nonce_source=lambda: next(nonces))
    assert all(r.counters == LinkCounters() for r in second)


def test_emit_without_key_fails():
    state = RouterAccounting(1, None, [0], period=1)
    with pytest.raises(dpifa.UnsignedIdentityError):
        emit_reports(state, 0, cycle=0, timestamp=1, nonce_source=lambda: 1)


def test_emit_nonces_unique_within_cycle_even_with_colliding_source():
    state = RouterAccounting(1, Signer(3), [0, 2, 3], period=1)
    draws = iter([5, 5, 5, 6, 6, 7])
    reports = emit_reports(state, 0, cycle=0, timestamp=1, nonce_source=lambda: next(draws))
    assert [r.nonce for r in reports] == [5, 6, 7]


def make_store(keys, cycle=0, seqs=range(0, 4), window=(0, 1000)):
    return CycleStore(cycle, seqs, window, {i: k.public for i, k in enumerate(keys)})


def test_ingest_valid_then_duplicate():
    ks = signers(2)
    store = make_store(ks)
    r = sign_report(ks[0], 0, 1, 0, 0, LinkCounters(), 10, 1)
    assert dpifa.ingest(store, r)
    assert store.ingest(r) is RejectReason.DUPLICATE
    assert len(store) == 1


def test_ingest_wrong_key():
    ks = signers(3)
    store = make_store(ks)
    r = sign_report(ks[2], 0, 1, 0, 0, LinkCounters(), 10, 1)
    assert store.ingest(r) is RejectReason.BAD_SIGNATURE
    assert len(store) == 0


@pytest.mark.parametrize(
    "kwargs,reason",
    [
        (dict(cycle=1), RejectReason.WRONG_CYCLE),
        (dict(seq=9), RejectReason.WRONG_CYCLE),
        (dict(timestamp=1000), RejectReason.STALE),
        (dict(rid=5), RejectReason.UNKNOWN_REPORTER),
    ],
)
def test_ingest_rejections(kwargs, reason):
    ks = signers(2)
    store = make_store(ks)
    args = dict(rid=0, nid=1, cycle=0, seq=0, timestamp=10, nonce=1)
    args.update(kwargs)
    r = sign_report(ks[0], args["rid"], args["nid"], args["cycle"], args["seq"], LinkCounters(),
                    args["timestamp"], args["nonce"])
    assert store.ingest(r) is reason
    assert store.rejected == {reason: 1}


def test_ingest_replayed_nonce():
    ks = signers(2)
    store = make_store(ks)
    assert store.ingest(sign_report(ks[0], 0, 1, 0, 0, LinkCounters(), 10, 42)) is None
    assert store.ingest(sign_report(ks[0], 0, 1, 0, 1, LinkCounters(), 20, 42)) is RejectReason.REPLAYED_NONCE
    # the same nonce from another reporter is fine
    assert store.ingest(sign_report(ks[1], 1, 0, 0, 0, LinkCounters(), 10, 42)) is None


def test_aggregation_is_linear_over_seq():
    ks = signers(2)
    store = make_store(ks)
    rng = random.Random(1)
    snaps = []
    for seq in range(4):
        vals = [rng.randrange(50) for _ in range(10)]
        snaps.append(vals)
        store.ingest(sign_report(ks[0], 0, 1, 0, seq, LinkCounters.from_tuple(vals), 10 + seq, seq))
        store.ingest(sign_report(ks[1], 1, 0, 0, seq, LinkCounters(), 10 + seq, seq))
    agg = aggregate(store)
    assert agg.get(0, 1).as_tuple() == tuple(map(sum, zip(*snaps)))
    assert agg.missing == []


def test_aggregate_lists_missing_and_exclusion():
    ks = signers(3)
    store = make_store(ks, seqs=range(2))
    for seq in range(2):
        store.ingest(sign_report(ks[0], 0, 1, 0, seq, LinkCounters(), 10 + seq, seq))
        store.ingest(sign_report(ks[1], 1, 2, 0, seq, LinkCounters(), 10 + seq, 10 + seq))
        store.ingest(sign_report(ks[2], 2, 1, 0, seq, LinkCounters(), 10 + seq, seq))
    store.ingest(sign_report(ks[1], 1, 0, 0, 0, LinkCounters(), 10, 50))
    agg = aggregate(store)
    assert agg.missing == [(1, 0, 1)]
    kept = agg.without_incomplete()
    assert set(kept.links) == {(1, 2), (2, 1)}
    assert kept.excluded == {frozenset((0, 1))}


def test_aggregate_with_registered_links_catches_silent_link():
    ks = signers(3)
    store = make_store(ks, seqs=range(1))
    store.ingest(sign_report(ks[0], 0, 1, 0, 0, LinkCounters(), 10, 1))
    store.ingest(sign_report(ks[1], 1, 0, 0, 0, LinkCounters(), 10, 1))
    agg = aggregate(store, expected_links=[(0, 1), (1, 0), (1, 2), (2, 1)])
    assert agg.missing == [(1, 2, 0), (2, 1, 0)]


def test_honest_two_router_exchange_no_violations():
    agg = counters_from_walks([(0, 1)], [((0, 1), 3, 100), ((1, 0), 2, 50)])
    assert audit(agg) == []


def test_asymmetric_honest_traffic_passes():
    agg = counters_from_walks([(0, 1)], [((0, 1), 9, 100)])
    assert check_symmetry(agg) == []


def test_under_reported_input_flags_link():
    agg = counters_from_walks([(0, 1)], [((0, 1), 9, 100)])
    agg.links[(1, 0)].input.packets -= 2
    v = check_symmetry(agg)
    assert [(x.router, x.neighbor, x.unit, x.left, x.right) for x in v] == [(0, 1, "packets", 9, 7)]


CHAIN = [(0, 1), (1, 2)]  # A=0, B=1, C=2


def test_transit_router_conserves():
    agg = counters_from_walks(CHAIN, [((0, 1, 2), 5, 100)])
    assert check_conservation(agg, 1)
    assert check_ofn(agg) == []


def test_dropping_transit_router_fails_conservation():
    agg = counters_from_walks(CHAIN, [((0, 1, 2), 5, 100)])
    # B drops 2 of 5 and reports truthfully: only 3 go out (and C sees 3)
    agg.links[(1, 2)].output = Tally(3, 300)
    agg.links[(2, 1)].input = Tally(3, 300)
    agg.links[(2, 1)].terminated = Tally(3, 300)
    assert not check_conservation(agg, 1)
    assert check_symmetry(agg) == []


def test_isolated_router_conserves():
    assert check_conservation(AggregatedCounters({}), 9)


def test_joint_s_t_inflation_caught_by_ofn_only():
    agg = counters_from_walks(CHAIN, [((0, 1, 2), 5, 100)])
    agg.links[(1, 2)].started = Tally(2, 200)
    agg.links[(1, 0)].terminated = Tally(2, 200)
    assert check_conservation(agg, 1)
    assert check_symmetry(agg) == []
    flagged = check_ofn(agg)
    assert {(v.router, v.neighbor) for v in flagged} == {(1, 2)}


def test_zero_traffic_link_trivially_equal():
    agg = AggregatedCounters({(0, 1): LinkCounters(), (1, 0): LinkCounters()})
    assert audit(agg) == []


def test_square_fixture_honest_is_clean():
    assert audit(square_agg()) == []


def test_every_single_field_tamper_is_detected():
    base = square_agg()
    count = 0
    for link in base.links:
        for f in FIELDS:
            for unit in ("packets", "bytes"):
                for delta in (1, -1):
                    agg = AggregatedCounters({k: v.copy() for k, v in base.links.items()})
                    tally = getattr(agg.links[link], f)
                    setattr(tally, unit, getattr(tally, unit) + delta)
                    assert audit(agg), (link, f, unit, delta)
                    count += 1
    assert count == len(base.links) * 5 * 2 * 2 == 200


def test_infer_topology_includes_registered_zero_traffic_links():
    agg = counters_from_walks(CHAIN, [((0, 1, 2), 1, 1)])
    g = infer_topology(agg, registered_links=[(2, 3)])
    assert g == {0: {1}, 1: {0, 2}, 2: {1, 3}, 3: {2}}
    assert infer_topology(agg, registered_links=[(2, 3)], members=[0, 1, 2]) == {0: {1}, 1: {0, 2}, 2: {1}}


def test_records_roundtrip():
    ks = signers(2)
    reports = [sign_report(ks[0], 0, 1, 0, s, LinkCounters.from_tuple(range(10)), 10 + s, s) for s in range(2)]
    directory = {i: k.public for i, k in enumerate(ks)}
    lines = list(dpifa.export_records(reports, directory, cycle=0, seqs=range(2), window=(0, 100)))
    assert json.loads(lines[0])["type"] == "cycle"
    store, rejected = dpifa.import_records(lines)
    assert rejected == [] and len(store) == 2
    # replaying the dump twice: every duplicate is rejected
    store, rejected = dpifa.import_records(lines + lines[-2:])
    assert [r[2] for r in rejected] == [RejectReason.DUPLICATE] * 2


def test_records_malformed():
    with pytest.raises(ValueError):
        dpifa.import_records(['{"type": "report", "wire": "00", "ext": "00"}'])
    with pytest.raises(ValueError):
        dpifa.import_records(["not json"])
    with pytest.raises(ValueError):
        dpifa.import_records([])
