"""Event ordering and lossy message dissemination."""

from __future__ import annotations

import heapq
import random
from collections import Counter
from typing import Any, Callable, List, Tuple

MESSAGE_CLASSES = ("dpifa", "dpifa_ext", "dpifa_retry", "stp", "confirmation", "announcement", "musig")


class EventQueue:
    """Events ordered by (block height, insertion sequence)."""

    def __init__(self) -> None:
        self._heap: List[Tuple[int, int, Callable[..., Any], Tuple[Any, ...]]] = []
        self._seq = 0

    def schedule(self, height: int, action: Callable[..., Any], *args: Any) -> None:
        heapq.heappush(self._heap, (height, self._seq, action, args))
        self._seq += 1

    def run(self) -> None:
        while self._heap:
            _, _, action, args = heapq.heappop(self._heap)
            action(*args)

    def __len__(self) -> int:
        return len(self._heap)


class Bus:
    """Counts bytes per message class once per emission and draws per-receiver loss."""

    def __init__(self, loss_prob: float, rng: random.Random):
        self.loss_prob = loss_prob
        self.rng = rng
        self.bytes: Counter = Counter()
        self.messages: Counter = Counter()
        self.dropped = 0

    def emit(self, kind: str, size: int) -> None:
        if kind not in MESSAGE_CLASSES:
            raise ValueError(f"unknown message class {kind!r}")
        self.bytes[kind] += size
        self.messages[kind] += 1

    def delivered(self) -> bool:
        """One loss draw for one receiver."""
        if self.loss_prob and self.rng.random() < self.loss_prob:
            self.dropped += 1
            return False
        return True

    def snapshot(self) -> dict:
        return {k: self.bytes.get(k, 0) for k in MESSAGE_CLASSES}

    def reset(self) -> None:
        self.bytes.clear()
        self.messages.clear()
        self.dropped = 0
