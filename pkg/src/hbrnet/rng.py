"""Deterministic random streams with explicit draw counters."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1


@dataclass
class RngStream:
    """Counter-based source of independent numpy generators.

    Each draw() builds a fresh Generator from (seed, counter) and bumps the
    counter, so a call site reproduces exactly no matter how much randomness
    unrelated code consumed in between.  Identical (seed, counter) pairs give
    identical sequences on every platform because SeedSequence hashing is
    platform-independent.
    """

    seed: int
    counter: int = 0

    def __post_init__(self) -> None:
        if not 0 <= int(self.seed) <= _MASK64:
            raise ValueError(f"seed {self.seed} outside unsigned 64-bit range")
        if not 0 <= int(self.counter) <= _MASK64:
            raise ValueError(f"counter {self.counter} outside unsigned 64-bit range")
        self.seed = int(self.seed)
        self.counter = int(self.counter)

    def draw(self) -> np.random.Generator:
        """Return a fresh generator keyed by (seed, counter), then advance."""
        gen = np.random.default_rng(np.random.SeedSequence([self.seed, self.counter]))
        self.counter += 1
        return gen

    def derive(self, label: str) -> "RngStream":
        """Child stream keyed by a text label; counter starts at zero.

        Uses blake2b rather than Python's hash() so the mapping is stable
        across processes and platforms.
        """
        digest = hashlib.blake2b(
            f"{self.seed}/{label}".encode("utf-8"), digest_size=8
        ).digest()
        return RngStream(seed=int.from_bytes(digest, "little"))

    def state(self) -> tuple[int, int]:
        return (self.seed, self.counter)
