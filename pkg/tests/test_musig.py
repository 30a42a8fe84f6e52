import hashlib
import random

import pytest

import oracles
from harpia import musig
from harpia.musig import (
    KeyList,
    MissingContributionError,
    MultiSignature,
    MuSigAbort,
    MuSigSession,
    Stage,
    StageError,
    aggregate_key,
    run_session,
    threshold_combinations,
    threshold_m,
    threshold_subsets,
    verify,
)
from harpia.secp256k1 import N, base_mul, encode_point, multi_mul, point_add

# Frozen from tests/oracles.py (textbook affine arithmetic, raw hashlib).
AGG_ONE_KEY = "02344f59b1d51b54bd346df42a0eaee45ab534d51d2ffd166ac7d404c60e3077a1"
AGG_TWO_KEYS = "027321286a63cf77d647afec2228615893c830199094fa4094e90d783b6781d6d1"


def test_aggregate_is_order_independent(keys):
    a = aggregate_key([keys[0], keys[1], keys[2]])
    b = aggregate_key([keys[2].public, keys[0].encoded, keys[1]])
    assert a.point == b.point
    assert a.source == b.source


def test_single_key_aggregate_matches_oracle(keys):
    agg = aggregate_key([keys[0]])
    assert agg.encoded.hex() == AGG_ONE_KEY
    assert agg.point == oracles.replay_aggregate([keys[0].public])
    a = agg.coefficients[0]
    assert agg.point == oracles.affine_mul(a, keys[0].public)


def test_two_key_aggregate_matches_step_replay(keys):
    agg = aggregate_key([keys[1], keys[0]])
    assert agg.encoded.hex() == AGG_TWO_KEYS
    assert agg.point == oracles.replay_aggregate([keys[0].public, keys[1].public])


def test_keylist_is_sorted_concatenation(keys):
    kl = KeyList([keys[3], keys[1], keys[2]])
    assert list(kl.keys) == sorted(k.encoded for k in (keys[1], keys[2], keys[3]))
    assert kl.encoding == b"".join(kl.keys)
    with pytest.raises(ValueError):
        KeyList([keys[0], keys[0]])
    with pytest.raises(ValueError):
        KeyList([])


def test_aggregate_rejects_invalid_points(keys):
    with pytest.raises(ValueError):
        aggregate_key([keys[0].encoded, b"\x02" + (5).to_bytes(32, "big")])
    with pytest.raises(ValueError):
        aggregate_key([(1, 1)])


def test_commit_is_hash_of_public_nonce(keys, counter_nonces):
    s = MuSigSession(b"m", [keys[0], keys[1]], keys[0], nonce_source=counter_nonces)
    t = s.commit()
    assert len(t) == 32
    assert s.own_public_nonce == base_mul(s.own_nonce)
    assert t == hashlib.sha256(b"\x01" + encode_point(s.own_public_nonce)).digest()
    assert s.stage is Stage.COMMITTED


def test_fresh_nonces_per_session(keys):
    a = MuSigSession(b"same", [keys[0], keys[1]], keys[0])
    b = MuSigSession(b"same", [keys[0], keys[1]], keys[0])
    assert a.commit() != b.commit()


def test_commit_twice_is_rejected(keys):
    s = MuSigSession(b"m", [keys[0], keys[1]], keys[0])
    s.commit()
    with pytest.raises(StageError):
        s.commit()


def test_reveal_refuses_without_all_commitments(keys):
    signers = keys[:3]
    sessions = [MuSigSession(b"m", signers, kp) for kp in signers]
    commitments = {s.own_id: s.commit() for s in sessions}
    partial = dict(commitments)
    del partial[signers[2].encoded]
    with pytest.raises(MissingContributionError):
        sessions[0].reveal(partial)
    assert sessions[0].stage is Stage.COMMITTED
    sessions[0].reveal(commitments)
    assert sessions[0].stage is Stage.REVEALED


def test_out_of_order_calls(keys):
    s = MuSigSession(b"m", [keys[0], keys[1]], keys[0])
    with pytest.raises(StageError):
        s.reveal({})
    with pytest.raises(StageError):
        s.partial_sign({})
    with pytest.raises(StageError):
        s.combine({})


def test_honest_three_cosigners_verify(keys, counter_nonces):
    sig, agg = run_session(b"settle", keys[:3], nonce_source=counter_nonces)
    assert verify(b"settle", agg, sig)
    assert verify(b"settle", agg.point, sig)
    assert verify(b"settle", agg.encoded, sig)


def test_round_by_round_transcript(keys):
    signers = keys[:3]
    sessions = [MuSigSession(b"msg", signers, kp) for kp in signers]
    commitments = {s.own_id: s.commit() for s in sessions}
    nonces = {s.own_id: s.reveal(commitments) for s in sessions}
    partials = {s.own_id: s.partial_sign(nonces) for s in sessions}
    sig = sessions[1].combine(partials)
    # R is the product of the individual nonces and s is the sum of partials
    r = None
    for pt in nonces.values():
        r = point_add(r, pt)
    assert sig.nonce_point == r
    assert sig.scalar_sum == sum(partials.values()) % N
    # each partial satisfies g^{s_i} = R_i * X_i^{c a_i}
    c = musig.h_sig(sessions[0].aggkey.point, r, b"msg")
    for s in sessions:
        a = s.aggkey.coefficient(s.own_id)
        lhs = base_mul(partials[s.own_id])
        rhs = point_add(nonces[s.own_id], oracles.affine_mul(c * a % N, s.own_key.public))
        assert lhs == rhs
    assert all(s.stage is Stage.PARTIALLY_SIGNED for i, s in enumerate(sessions) if i != 1)
    assert sessions[1].stage is Stage.COMPLETE


def test_swapped_nonce_aborts(keys):
    signers = keys[:3]
    sessions = [MuSigSession(b"m", signers, kp) for kp in signers]
    commitments = {s.own_id: s.commit() for s in sessions}
    nonces = {s.own_id: s.reveal(commitments) for s in sessions}
    nonces[signers[2].encoded] = base_mul(12345)
    with pytest.raises(MuSigAbort) as err:
        sessions[0].partial_sign(nonces)
    assert err.value.cosigner == signers[2].encoded
    assert sessions[0].stage is Stage.ABORTED
    with pytest.raises(StageError):
        sessions[0].partial_sign(nonces)


def test_single_signer_reduces_to_tweaked_schnorr(keys, counter_nonces):
    sig, agg = run_session(b"solo", [keys[4]], nonce_source=counter_nonces)
    assert verify(b"solo", agg, sig)
    a = agg.coefficients[0]
    assert agg.point == oracles.affine_mul(a, keys[4].public)
    # plain Schnorr check with secret a*x
    c = musig.h_sig(agg.point, sig.nonce_point, b"solo")
    assert base_mul(sig.scalar_sum) == point_add(sig.nonce_point, base_mul(c * a * keys[4].secret))


def test_combine_requires_every_partial(keys):
    signers = keys[:2]
    sessions = [MuSigSession(b"m", signers, kp) for kp in signers]
    commitments = {s.own_id: s.commit() for s in sessions}
    nonces = {s.own_id: s.reveal(commitments) for s in sessions}
    own = sessions[0].partial_sign(nonces)
    with pytest.raises(MissingContributionError):
        sessions[0].combine({sessions[0].own_id: own})


def test_verify_rejects_tampering(keys):
    sig, agg = run_session(b"pay", keys[:2])
    assert not verify(b"pay", agg, MultiSignature(sig.nonce_point, (sig.scalar_sum + 1) % N))
    assert not verify(b"pax", agg, sig)
    assert not verify(b"pay", aggregate_key(keys[:3]), sig)
    assert not verify(b"pay", b"\x02" + bytes(32), sig)
    assert not verify(b"pay", agg, MultiSignature((1, 1), sig.scalar_sum))
    assert not verify(b"pay", agg, MultiSignature(sig.nonce_point, N + 1))


def test_multisignature_serialization(keys):
    sig, _ = run_session(b"x", keys[:2])
    data = sig.to_bytes()
    assert len(data) == 65
    assert MultiSignature.from_bytes(data) == sig


def test_session_requires_own_key_in_list(keys):
    with pytest.raises(ValueError):
        MuSigSession(b"m", [keys[0], keys[1]], keys[2])


@pytest.mark.parametrize(
    "n,zeta,m,count",
    [(8, 75, 6, 37), (32, 87.5, 28, 41449), (1, 75, 1, 1), (4, 75, 3, 5), (16, 75, 12, 2517)],
)
def test_threshold_subset_counts(n, zeta, m, count):
    assert threshold_m(n, zeta) == m
    assert sum(1 for _ in threshold_subsets(n, zeta)) == count == oracles.binomial_sum(n, m)


@pytest.mark.parametrize("zeta", [49.9, 100, 120, -1])
def test_zeta_out_of_range(zeta):
    with pytest.raises(ValueError):
        threshold_m(4, zeta)


def test_threshold_m_matches_linear_search():
    for n in range(1, 33):
        for num, den in ((75, 1), (175, 2), (375, 4), (50, 1), (99, 1)):
            assert threshold_m(n, num / den) == oracles.min_m(n, num, den)


def test_threshold_combinations_eight_of_seventy_five(keys):
    members = KeyList(keys[:8])
    combos = threshold_combinations(members, 75)
    assert len(combos) == 37
    subsets = oracles.all_index_subsets(8, 6)
    for agg, idx in zip(combos, subsets):
        assert agg.source == members.subset(idx)
    assert len({c.encoded for c in combos}) == 37


def test_threshold_combinations_degenerate(keys):
    combos = threshold_combinations(KeyList([keys[0]]), 93.75)
    assert [c.point for c in combos] == [aggregate_key([keys[0]]).point]


def test_combination_order_is_permutation_invariant(keys):
    a = threshold_combinations(KeyList(keys[:5]), 75)
    shuffled = list(keys[:5])
    random.Random(3).shuffle(shuffled)
    b = threshold_combinations(KeyList(shuffled), 75)
    assert [x.encoded for x in a] == [x.encoded for x in b]


def test_completeness_every_subset_small_n(keys):
    for n in range(1, 5):
        members = KeyList(keys[:n])
        by_key = {k.encoded: k for k in keys[:n]}
        for idx in threshold_subsets(n, 50):
            signers = [by_key[members.keys[i]] for i in idx]
            sig, agg = run_session(b"complete", signers)
            assert verify(b"complete", agg, sig)


def test_soundness_wrong_coefficient(keys):
    sig, agg = run_session(b"m", keys[:3])
    coeffs = list(agg.coefficients)
    coeffs[1] = (coeffs[1] + 1) % N
    forged = multi_mul(list(zip(coeffs, agg.source.points)))
    assert not verify(b"m", forged, sig)
    assert verify(b"m", multi_mul(list(zip(agg.coefficients, agg.source.points))), sig)
