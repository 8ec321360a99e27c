"""Reproducible random streams.

All randomness in the package flows through :class:`SeededRng`, a thin layer
over numpy's ``PCG64`` bit generator. Only the raw 64-bit output stream of the
bit generator is used (numpy guarantees its stability across releases); the
mapping from raw words to floats, bounded integers and permutations is done
here so it cannot drift with ``numpy.random.Generator`` internals.

Child streams are derived by hashing ``(seed, *keys)`` with BLAKE2b, so the
stream for e.g. round ``t`` does not depend on how many numbers earlier rounds
consumed.
"""

from __future__ import annotations

import hashlib
import struct
from typing import Sequence, TypeVar

import numpy as np

T = TypeVar("T")

_MASK64 = (1 << 64) - 1


def derive_seed(seed: int, *keys: object) -> int:
    """Hash a parent seed and a key path into a new 64-bit seed."""
    h = hashlib.blake2b(digest_size=8)
    h.update(struct.pack("<Q", seed & _MASK64))
    for key in keys:
        token = repr(key).encode("utf-8")
        h.update(struct.pack("<I", len(token)))
        h.update(token)
    return int.from_bytes(h.digest(), "little")


class SeededRng:
    """Deterministic random source with a documented generator (PCG64).

    A single instance must never be shared between concurrent tasks; derive a
    child per task with :meth:`child` instead.
    """

    def __init__(self, seed: int):
        if not isinstance(seed, (int, np.integer)) or seed < 0:
            raise ValueError(f"seed must be a non-negative integer, got {seed!r}")
        self.seed = int(seed) & _MASK64
        self._bitgen = np.random.PCG64(self.seed)
        self.counter = 0

    def child(self, *keys: object) -> "SeededRng":
        return SeededRng(derive_seed(self.seed, *keys))

    def raw(self, size: int | None = None):
        """Next raw 64-bit word(s) of the stream."""
        if size is None:
            self.counter += 1
            return int(self._bitgen.random_raw())
        self.counter += size
        return self._bitgen.random_raw(size)

    def random(self, size: int | None = None):
        """Uniform float(s) in [0, 1) with 53 bits of resolution."""
        if size is None:
            return (self.raw() >> 11) * 2.0**-53
        words = self.raw(size)
        return (words >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def uniform(self, low: float, high: float, size: int) -> np.ndarray:
        return low + (high - low) * self.random(size)

    def below(self, n: int) -> int:
        """Uniform integer in [0, n), unbiased via rejection."""
        if n <= 0:
            raise ValueError("n must be positive")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.raw()
            if x < limit:
                return x % n

    def shuffle(self, items: Sequence[T]) -> list[T]:
        """Return a Fisher-Yates shuffled copy of ``items``."""
        out = list(items)
        for i in range(len(out) - 1, 0, -1):
            j = self.below(i + 1)
            out[i], out[j] = out[j], out[i]
        return out

    def choose(self, items: Sequence[T], k: int) -> list[T]:
        """``k`` distinct elements drawn uniformly without replacement."""
        if not 0 <= k <= len(items):
            raise ValueError(f"cannot choose {k} of {len(items)} items")
        pool = list(items)
        for i in range(k):
            j = i + self.below(len(pool) - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k]
