"""Seeded random streams.

Every piece of randomness in the package (weight initialization, shuffling,
subsampling) flows through :class:`Rng`, which wraps numpy's Philox 4x64
counter-based bit generator. Philox guarantees that the same seed produces
the same draw sequence on every platform, and counter-based keys make
independent child streams cheap.
"""

from __future__ import annotations

import zlib

import numpy as np


def _label_key(label: int | str) -> int:
    """Map a stream label to a stable 32-bit integer."""
    if isinstance(label, str):
        return zlib.crc32(label.encode("utf-8"))
    return int(label) & 0xFFFFFFFF


class Rng:
    """A named, splittable random stream with a fixed 64-bit seed.

    ``split`` derives an independent child stream from a label, so e.g. the
    weight-init stream and the shuffling stream never interact: consuming
    draws from one cannot shift the other.
    """

    def __init__(self, seed: int, _spawn_key: tuple[int, ...] = ()) -> None:
        self.seed = int(seed)
        self._spawn_key = tuple(_spawn_key)
        seq = np.random.SeedSequence(self.seed, spawn_key=self._spawn_key)
        self.generator = np.random.Generator(np.random.Philox(seq))

    def split(self, *labels: int | str) -> "Rng":
        """Derive an independent child stream keyed by ``labels``."""
        key = self._spawn_key + tuple(_label_key(l) for l in labels)
        return Rng(self.seed, _spawn_key=key)

    # thin delegates for the draws the package actually uses

    def uniform(self, low: float, high: float, size=None) -> np.ndarray:
        return self.generator.uniform(low, high, size=size)

    def normal(self, loc: float = 0.0, scale: float = 1.0, size=None) -> np.ndarray:
        return self.generator.normal(loc, scale, size=size)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self.generator.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self.generator.choice(n, size=size, replace=replace)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, spawn_key={self._spawn_key})"
