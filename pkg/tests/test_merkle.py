import hashlib
import os
import random

import pytest

import oracles
from harpia.merkle import (
    MerkleProof,
    build_tree,
    leaf_hash,
    next_power_of_two,
    prove_membership,
    verify_membership,
)
from harpia.musig import KeyList, threshold_combinations


def fake_leaves(count, seed=0):
    rng = random.Random(seed)
    return [bytes([2]) + rng.randbytes(32) for _ in range(count)]


def test_three_leaves_hand_built():
    a, b, c = fake_leaves(3)
    ha, hb, hc = (oracles.sha_tree(b"\x00" + x) for x in (a, b, c))
    left = oracles.sha_tree(b"\x01" + ha + hb)
    right = oracles.sha_tree(b"\x01" + hc + hc)
    expected = oracles.sha_tree(b"\x01" + left + right)
    tree = build_tree([a, b, c])
    assert tree.leaves == (a, b, c, c)
    assert tree.root == expected
    assert tree.leaf_count == 3


def test_single_leaf_root_is_leaf_hash():
    (a,) = fake_leaves(1)
    tree = build_tree([a])
    assert tree.root == leaf_hash(a) == oracles.sha_tree(b"\x00" + a)
    assert tree.depth == 0
    proof = prove_membership(tree, a)
    assert proof.path == ()
    assert verify_membership(tree.root, a, proof)


def test_thirty_seven_leaves_pad_to_sixty_four():
    tree = build_tree(fake_leaves(37))
    assert len(tree.leaves) == 64
    assert tree.depth == 6
    assert tree.node_count == 127
    assert len(tree.root) == 32


def test_empty_tree_rejected():
    with pytest.raises(ValueError):
        build_tree([])


@pytest.mark.parametrize("n", [1, 2, 3, 5, 8, 9])
def test_next_power_of_two(n):
    p = next_power_of_two(n)
    assert p >= n and p & (p - 1) == 0 and (p == 1 or p // 2 < n)


def test_every_leaf_of_combination_tree_proves(keys):
    combos = threshold_combinations(KeyList(keys[:8]), 75)
    tree = build_tree(combos)
    for agg in combos:
        proof = prove_membership(tree, agg)
        assert len(proof.path) == 6
        assert verify_membership(tree.root, agg, proof)
        assert verify_membership(tree.root, agg.encoded, MerkleProof.from_bytes(proof.to_bytes()))


def test_non_member_with_valid_looking_path_fails():
    leaves = fake_leaves(20, seed=1)
    tree = build_tree(leaves)
    rng = random.Random(9)
    for _ in range(200):
        outsider = bytes([3]) + rng.randbytes(32)
        proof = prove_membership(tree, rng.choice(leaves))
        assert not verify_membership(tree.root, outsider, proof)


def test_flipped_side_bit_fails_even_next_to_padding():
    leaves = fake_leaves(3)
    tree = build_tree(leaves)
    proof = prove_membership(tree, leaves[2])  # sibling is its own padding copy
    path = list(proof.path)
    sib, side = path[0]
    path[0] = (sib, side ^ 1)
    assert not verify_membership(tree.root, leaves[2], MerkleProof(proof.leaf_index, tuple(path)))


def test_proof_wire_format():
    tree = build_tree(fake_leaves(5))
    proof = prove_membership(tree, tree.leaves[4])
    data = proof.to_bytes()
    assert len(data) == 4 + 33 * 3 == proof.size
    assert data[:4] == (4).to_bytes(4, "big")
    assert MerkleProof.from_bytes(data) == proof
    with pytest.raises(ValueError):
        MerkleProof.from_bytes(data[:-1])


def test_index_out_of_range_fails():
    tree = build_tree(fake_leaves(4))
    proof = prove_membership(tree, tree.leaves[1])
    assert not verify_membership(tree.root, tree.leaves[1], MerkleProof(proof.leaf_index + 4, proof.path))


def test_wrong_root_fails():
    leaves = fake_leaves(6)
    tree = build_tree(leaves)
    proof = prove_membership(tree, leaves[0])
    assert not verify_membership(hashlib.sha256(b"other").digest(), leaves[0], proof)
    assert not verify_membership(os.urandom(32), leaves[0], proof)
