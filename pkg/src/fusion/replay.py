"""Reservoir-sampled rehearsal buffer.

Classic algorithm R: the first `capacity` items fill the buffer, after which
item number t replaces a uniformly chosen slot with probability capacity/t.
Every item in the stream therefore ends up retained with equal probability,
no matter how long the stream runs.
"""

from __future__ import annotations

import random

from .errors import ConfigError, StateError


class ReservoirBuffer:
    def __init__(self, capacity: int = 500, seed: int = 0):
        if capacity < 1:
            raise ConfigError(f"capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.items: list = []
        self.total_seen = 0
        self._rng = random.Random(seed)

    def __len__(self) -> int:
        return len(self.items)

    def insert(self, item) -> None:
        self.total_seen += 1
        if len(self.items) < self.capacity:
            self.items.append(item)
            return
        j = self._rng.randrange(self.total_seen)
        if j < self.capacity:
            self.items[j] = item

    def extend(self, items) -> None:
        for item in items:
            self.insert(item)

    def sample(self, n: int, seed: int = 0) -> list:
        """Draw n items uniformly with replacement; independent of insert RNG."""
        if not self.items:
            raise StateError("cannot sample from an empty buffer")
        if n < 0:
            raise ConfigError(f"sample size must be >= 0, got {n}")
        rng = random.Random(seed)
        return [self.items[rng.randrange(len(self.items))] for _ in range(n)]


def reservoir_insert(buffer: ReservoirBuffer, item) -> ReservoirBuffer:
    """Stream one item into the buffer; returns the same buffer for chaining."""
    buffer.insert(item)
    return buffer


def reservoir_batch(buffer: ReservoirBuffer, n: int, seed: int = 0) -> list:
    """Uniform with-replacement batch from the buffer; deterministic in seed."""
    return buffer.sample(n, seed)
