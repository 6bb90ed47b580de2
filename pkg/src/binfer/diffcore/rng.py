"""Counter-based random streams keyed by (seed, stream_id)."""
from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


class RngStream:
    """Philox-4x64 stream whose 128-bit key is ``seed | stream_id << 64``.

    Identical (seed, stream_id) pairs replay identical draws; different
    stream ids are different Philox keys and hence independent streams.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        if seed < 0 or stream_id < 0:
            raise ValueError("seed and stream_id must be non-negative")
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        key = self.seed | (self.stream_id << 64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"

    def spawn(self, stream_id: int) -> "RngStream":
        """Fresh stream sharing this seed under another id."""
        return RngStream(self.seed, stream_id)

    def normal(self, shape=()) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def uniform(self, low=0.0, high=1.0, shape=()) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def integers(self, low, high=None, shape=()) -> np.ndarray:
        return self._gen.integers(low, high, shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = True) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    def random(self, shape=()) -> np.ndarray:
        return self._gen.random(shape)


def sample_standard_normal(rng: RngStream, shape) -> np.ndarray:
    """i.i.d. N(0, 1) draws of ``shape`` from ``rng``."""
    return rng.normal(shape)
