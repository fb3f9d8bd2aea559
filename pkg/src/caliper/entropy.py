"""Seedable randomness.

Production runs draw from the operating system CSPRNG.  Simulations pass an
integer seed so that keys, pads, nonces and envelopes are reproducible; the
same code path runs in both modes.
"""

import hashlib
import random
import secrets

import numpy as np


class Entropy:
    def __init__(self, seed: int | None = None):
        self.seed = seed
        if seed is None:
            self._gen = None
            self._sys = random.SystemRandom()
        else:
            self._gen = np.random.default_rng(seed)

    @property
    def deterministic(self) -> bool:
        return self._gen is not None

    def bytes(self, n: int) -> bytes:
        if n == 0:
            return b""
        if self._gen is None:
            return secrets.token_bytes(n)
        return self._gen.bytes(n)

    def randbelow(self, n: int) -> int:
        if n <= 0:
            raise ValueError("upper bound must be positive")
        if self._gen is None:
            return secrets.randbelow(n)
        return int(self._gen.integers(n))

    def sample(self, n: int, k: int) -> list[int]:
        """``k`` distinct integers from ``range(n)`` in random order."""
        if self._gen is None:
            return self._sys.sample(range(n), k)
        return [int(x) for x in self._gen.permutation(n)[:k]]

    def random(self) -> float:
        if self._gen is None:
            return self._sys.random()
        return float(self._gen.random())

    def normal(self, loc, scale, size=None):
        gen = self._gen if self._gen is not None else np.random.default_rng()
        return gen.normal(loc, scale, size)

    def uniform(self, low, high, size=None):
        gen = self._gen if self._gen is not None else np.random.default_rng()
        return gen.uniform(low, high, size)

    def spawn(self, label: str) -> "Entropy":
        """Independent child stream; deterministic iff the parent is."""
        if self._gen is None:
            return Entropy()
        h = hashlib.sha256(f"{self.seed}/{label}".encode()).digest()
        return Entropy(int.from_bytes(h[:8], "big"))


def as_entropy(rng) -> Entropy:
    if isinstance(rng, Entropy):
        return rng
    return Entropy(rng)
