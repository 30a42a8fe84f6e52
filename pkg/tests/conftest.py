import hashlib
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from harpia.musig import KeyPair  # noqa: E402
from harpia.secp256k1 import N  # noqa: E402


def keypair(label: str) -> KeyPair:
    secret = int.from_bytes(hashlib.sha256(label.encode()).digest(), "big") % (N - 1) + 1
    return KeyPair.from_secret(secret)


@pytest.fixture(scope="session")
def keys():
    return [keypair(f"test-key-{i}") for i in range(12)]


@pytest.fixture
def counter_nonces():
    """Deterministic nonce source for reproducible transcripts."""
    state = {"i": 0}

    def draw():
        state["i"] += 1
        return int.from_bytes(hashlib.sha256(b"nonce" + state["i"].to_bytes(4, "big")).digest(), "big") % N or 1

    return draw
