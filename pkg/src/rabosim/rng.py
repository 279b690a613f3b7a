"""Reproducible per-stream random number generation.

Every stochastic draw in the simulator comes from an ``RngStream`` keyed by
``(seed, client, round, purpose)``. Streams are built on the counter-based
Philox generator, so any single client-round can be replayed without
replaying the run, and distinct keys give statistically independent
sequences. Keys are hashed with BLAKE2b, which is stable across platforms
and Python processes (unlike the builtin ``hash``).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np


def _derive_key(seed: int, client: int, round_index: int, purpose: str) -> np.ndarray:
    payload = f"{seed}|{client}|{round_index}|{purpose}".encode()
    digest = hashlib.blake2b(payload, digest_size=16).digest()
    return np.frombuffer(digest, dtype=np.uint64)


@dataclass(frozen=True)
class RngStream:
    """Deterministic random stream for one (client, round, purpose) slot.

    The stream is stateless: ``generator()`` always starts the sequence from
    the beginning, so identical keys yield identical draws across runs.
    """

    seed: int
    client: int = 0
    round_index: int = 0
    purpose: str = ""

    def generator(self) -> np.random.Generator:
        key = _derive_key(self.seed, self.client, self.round_index, self.purpose)
        return np.random.Generator(np.random.Philox(key=key))

    def normal(self, size, scale: float = 1.0) -> np.ndarray:
        return scale * self.generator().standard_normal(size)

    def child(self, suffix: str) -> "RngStream":
        """Derive a sub-stream, e.g. one per inner epoch or per draw."""
        return RngStream(self.seed, self.client, self.round_index,
                         f"{self.purpose}/{suffix}")


def rng_stream(seed: int, client: int = 0, round_index: int = 0,
               purpose: str = "") -> RngStream:
    """Build the stream for a (seed, client, round, purpose) key."""
    return RngStream(seed, client, round_index, purpose)
