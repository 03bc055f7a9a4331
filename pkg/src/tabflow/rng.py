"""Counter-based splittable random streams.

Every stream is a Philox generator keyed by ``(seed, counter)``, so the same
pair always reproduces the same sequence and distinct counters give
statistically independent streams.
"""
from __future__ import annotations

import zlib

import numpy as np

# Named streams used across the package; the values are arbitrary but fixed.
STREAMS = ("splits", "init", "dropout", "sampling", "tuner", "shuffle", "data")


def stream_id(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


class Rng:
    """A reproducible random stream identified by ``(seed, counter)``."""

    def __init__(self, seed: int, counter: int = 0):
        if seed < 0 or counter < 0:
            raise ValueError("seed and counter must be non-negative")
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.counter = int(counter)
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.counter,))
        self._gen = np.random.Generator(np.random.Philox(ss))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, counter={self.counter})"

    def split(self, counter: int | str) -> "Rng":
        """Independent child stream. Strings are hashed to a counter."""
        if isinstance(counter, str):
            counter = stream_id(counter)
        # Mix the parent counter in so grandchildren differ from children.
        return Rng(self.seed, (self.counter * 1_000_003 + int(counter) + 1) & 0xFFFFFFFF)

    def normal(self, size) -> np.ndarray:
        return self._gen.standard_normal(size)

    def uniform(self, size) -> np.ndarray:
        return self._gen.random(size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def choice(self, options):
        return options[int(self._gen.integers(0, len(options)))]


def rng_normal(rng: Rng, n: int) -> np.ndarray:
    """``n`` standard-normal draws from ``rng``."""
    if n < 0:
        raise ValueError("n must be non-negative")
    return rng.normal(n)
