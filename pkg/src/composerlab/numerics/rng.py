"""Seeded random streams with purpose-based key splitting.

Streams are numpy ``PCG64`` generators seeded from
``SeedSequence(entropy=seed, spawn_key=(purpose_id, *subkeys))``.  Both the
seed-sequence hashing and PCG64 are specified bit-for-bit by numpy, so a
given (seed, purpose, subkeys) produces the same stream on every platform.
Distinct purposes never share a stream.
"""

from __future__ import annotations

import numpy as np

PURPOSES = {
    "data": 0,
    "init": 1,
    "noise": 2,
    "sampler": 3,
    "eval": 4,
    "ttt": 5,
    "features": 6,
    "calibration": 7,
    "probe": 8,
}

_MASK64 = (1 << 64) - 1


class SeededRng:
    """A 64-bit seed plus a key path; ``split`` derives child streams."""

    def __init__(self, seed: int, key: tuple[int, ...] = ()):
        self.seed = int(seed) & _MASK64
        self.key = tuple(int(k) for k in key)
        self._gen: np.random.Generator | None = None

    @property
    def generator(self) -> np.random.Generator:
        if self._gen is None:
            ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.key)
            self._gen = np.random.Generator(np.random.PCG64(ss))
        return self._gen

    def split(self, purpose: str | int, *subkeys: int) -> "SeededRng":
        pid = PURPOSES[purpose] if isinstance(purpose, str) else int(purpose)
        return SeededRng(self.seed, self.key + (pid,) + tuple(int(k) for k in subkeys))

    # thin pass-throughs used throughout the package
    def normal(self, size=None, scale: float = 1.0, dtype=np.float32) -> np.ndarray:
        return (self.generator.standard_normal(size, dtype=np.float64) * scale).astype(dtype)

    def uniform(self, low=0.0, high=1.0, size=None) -> np.ndarray:
        return self.generator.uniform(low, high, size)

    def integers(self, low, high=None, size=None) -> np.ndarray:
        return self.generator.integers(low, high, size)

    def choice(self, a, size=None, replace=True) -> np.ndarray:
        return self.generator.choice(a, size=size, replace=replace)

    def permutation(self, x) -> np.ndarray:
        return self.generator.permutation(x)

    def __repr__(self) -> str:
        return f"SeededRng(seed={self.seed}, key={self.key})"


def make_rng(seed: int, purpose: str | int, *subkeys: int) -> SeededRng:
    return SeededRng(seed).split(purpose, *subkeys)
