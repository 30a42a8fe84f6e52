"""Ledger construction helpers shared by the ledger and acceptance tests."""

from harpia.ledger import WEI_PER_ETHER, ContractParams, combination_root, sign_bundle
from harpia.settlement import TOKEN, sign_stp
from harpia.signing import Signer

ETH = WEI_PER_ETHER


def params(**kw):
    base = dict(beta=10, lam=600, zeta=75, delta=5, xi=5, tau=2 * ETH, phi=10 * ETH, reward=TOKEN, gamma=15)
    base.update(kw)
    return ContractParams(**base)


def member_keys(led, kps):
    return [kps[m.rid].public for m in led.read_members()]


def make_settle(led, kps, entries=None, proposer=0, signers=None, anchor=None, cycle=None, reward=None):
    """Build a correctly signed STP and MuSig bundle against the current state."""
    entries = entries if entries is not None else {m.rid: 0 for m in led.read_members()}
    preview = led.preview_settle(entries, proposer)
    after_keys = [kps[rid].public for rid in preview.members_after]
    root = combination_root(after_keys, led.params.zeta)
    stp = sign_stp(
        Signer(kps[proposer].secret), proposer, led.epoch if cycle is None else cycle,
        anchor or led.clock.hash, root, entries, led.params.reward if reward is None else reward, 0, 1,
    )
    signers = signers if signers is not None else sorted(kps)[:3]
    bundle = sign_bundle(stp.to_bytes(), [kps[r] for r in signers], member_keys(led, kps), led.params.zeta)
    return stp, bundle, root
