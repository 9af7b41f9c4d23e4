"""Seed-addressable random streams.

Every stochastic routine in the package receives an explicit ``RngStream``.
Streams are counter-based (Philox) and addressed by ``(seed, path)`` where
``path`` is a tuple of integers, so any sub-computation can deterministically
derive its own independent stream without consuming state from its parent.
"""

from __future__ import annotations

import numpy as np


class RngStream:
    """A reproducible random stream addressed by a seed and an integer path.

    Two streams with the same ``(seed, path)`` produce identical draws; child
    streams are statistically independent of their parents and siblings.
    The stream itself is stateful and must not be shared across threads.
    """

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.path = tuple(int(p) for p in path)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def child(self, *ids: int) -> "RngStream":
        """Derive an independent stream at ``path + ids`` (parent unchanged)."""
        return RngStream(self.seed, self.path + ids)

    def normal(self, size=None) -> np.ndarray:
        return self._gen.standard_normal(size)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def integers(self, low: int, high: int, size=None):
        """Uniform integers in the half-open range [low, high)."""
        return self._gen.integers(low, high, size=size)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, path={self.path})"
