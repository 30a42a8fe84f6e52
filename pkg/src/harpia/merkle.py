"""Merkle commitment over the permitted aggregated keys.

Leaves hash as ``H_tree(0x00 || X~)`` and internal nodes as
``H_tree(0x01 || left || right)``. The leaf list is padded by repeating
the last leaf until its length is a power of two.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

from harpia.musig import AggregatedKey, h_tree

LEAF_PREFIX = b"\x00"
NODE_PREFIX = b"\x01"
HASH_SIZE = 32
PROOF_ENTRY_SIZE = 1 + HASH_SIZE

Leaf = Union[AggregatedKey, bytes]


def _leaf_bytes(leaf: Leaf) -> bytes:
    return leaf.encoded if isinstance(leaf, AggregatedKey) else bytes(leaf)


def leaf_hash(leaf: Leaf) -> bytes:
    return h_tree(LEAF_PREFIX + _leaf_bytes(leaf))


def node_hash(left: bytes, right: bytes) -> bytes:
    return h_tree(NODE_PREFIX + left + right)


def next_power_of_two(n: int) -> int:
    return 1 << (n - 1).bit_length() if n > 1 else 1


@dataclass(frozen=True)
class MerkleProof:
    leaf_index: int
    path: Tuple[Tuple[bytes, int], ...]  # (sibling hash, side); side 1 = sibling on the left

    def to_bytes(self) -> bytes:
        out = [struct.pack(">I", self.leaf_index)]
        for sibling, side in self.path:
            out.append(bytes([side]) + sibling)
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "MerkleProof":
        if len(data) < 4 or (len(data) - 4) % PROOF_ENTRY_SIZE:
            raise ValueError("malformed Merkle proof encoding")
        (index,) = struct.unpack(">I", data[:4])
        path = []
        for off in range(4, len(data), PROOF_ENTRY_SIZE):
            path.append((data[off + 1 : off + PROOF_ENTRY_SIZE], data[off]))
        return cls(index, tuple(path))

    @property
    def size(self) -> int:
        return 4 + PROOF_ENTRY_SIZE * len(self.path)


@dataclass(frozen=True)
class CombinationMerkleTree:
    leaves: Tuple[bytes, ...]  # compressed keys, padded
    levels: Tuple[Tuple[bytes, ...], ...]  # levels[0] = leaf hashes, levels[-1] = (root,)
    leaf_count: int  # before padding
    threshold_m: Optional[int] = None
    total_n: Optional[int] = None

    @property
    def root(self) -> bytes:
        return self.levels[-1][0]

    @property
    def depth(self) -> int:
        return len(self.levels) - 1

    @property
    def node_count(self) -> int:
        return sum(len(level) for level in self.levels)

    def index_of(self, leaf: Leaf) -> int:
        return self.leaves.index(_leaf_bytes(leaf))


def build_tree(
    leaves: Sequence[Leaf], *, threshold_m: Optional[int] = None, total_n: Optional[int] = None
) -> CombinationMerkleTree:
    if not leaves:
        raise ValueError("cannot build a Merkle tree without leaves")
    raw = [_leaf_bytes(x) for x in leaves]
    padded = raw + [raw[-1]] * (next_power_of_two(len(raw)) - len(raw))
    level = [leaf_hash(x) for x in padded]
    levels = [tuple(level)]
    while len(level) > 1:
        level = [node_hash(level[i], level[i + 1]) for i in range(0, len(level), 2)]
        levels.append(tuple(level))
    return CombinationMerkleTree(tuple(padded), tuple(levels), len(raw), threshold_m, total_n)


def prove_membership(tree: CombinationMerkleTree, leaf: Leaf) -> MerkleProof:
    index = tree.index_of(leaf)
    path: List[Tuple[bytes, int]] = []
    i = index
    for level in tree.levels[:-1]:
        if i & 1:
            path.append((level[i - 1], 1))
        else:
            path.append((level[i + 1], 0))
        i >>= 1
    return MerkleProof(index, tuple(path))


def verify_membership(root: bytes, leaf: Leaf, proof: MerkleProof) -> bool:
    if proof.leaf_index >= 1 << len(proof.path):
        return False
    current = leaf_hash(leaf)
    for level, (sibling, side) in enumerate(proof.path):
        if len(sibling) != HASH_SIZE or side not in (0, 1):
            return False
        # side bits must agree with the index so a flipped bit cannot slip
        # through next to a duplicated padding leaf
        if side != (proof.leaf_index >> level) & 1:
            return False
        current = node_hash(sibling, current) if side else node_hash(current, sibling)
    return current == root
