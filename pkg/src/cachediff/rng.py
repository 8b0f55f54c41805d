"""Counter-based random number generation.

All randomness flows through numpy's Philox bit generator seeded via
``SeedSequence`` so streams are reproducible across platforms and
independent of draw order between substreams.  Exactly two root seeds
exist per run: one for model weights, one for noise.
"""

from __future__ import annotations

import numpy as np


class Rng:
    """A named, forkable random stream producing float32 draws."""

    def __init__(self, seed: int, spawn_key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.spawn_key = tuple(int(k) for k in spawn_key)
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=self.spawn_key)
        self._gen = np.random.Generator(np.random.Philox(seq))

    def child(self, index: int) -> "Rng":
        """Derive an independent substream; same (seed, key) -> same stream."""
        return Rng(self.seed, self.spawn_key + (int(index),))

    def normal(self, shape: tuple[int, ...], scale: float = 1.0) -> np.ndarray:
        """Gaussian draws, returned as float32."""
        x = self._gen.standard_normal(size=shape, dtype=np.float64)
        return (x * float(scale)).astype(np.float32)

    def uniform(self, shape: tuple[int, ...]) -> np.ndarray:
        """Uniform [0, 1) draws, returned as float32."""
        return self._gen.random(size=shape, dtype=np.float64).astype(np.float32)

    def integers(self, low: int, high: int, size: int) -> np.ndarray:
        """Uniform integers in [low, high)."""
        return self._gen.integers(low, high, size=size, dtype=np.int64)
