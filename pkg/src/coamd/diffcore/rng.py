"""Counter-based random streams.

Backed by NumPy's Philox bit generator.  A stream is identified by a
(seed, stream id) pair so independent workers can derive their own
generators without sharing state.
"""
from __future__ import annotations

import hashlib

import numpy as np

from .autograd import Tensor

_MASK64 = (1 << 64) - 1


def _derive(stream: int, child: int) -> int:
    h = hashlib.blake2b(f"{stream}:{child}".encode(), digest_size=8).digest()
    return int.from_bytes(h, "little")


class Rng:
    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream) & _MASK64
        self._gen = np.random.Generator(np.random.Philox(key=[self.seed, self.stream_id]))

    def spawn(self, child: int) -> "Rng":
        """Independent stream keyed on (seed, parent stream, child)."""
        return Rng(self.seed, _derive(self.stream_id, int(child)))

    def normal(self, shape, dtype=np.float32) -> np.ndarray:
        return self._gen.standard_normal(shape, dtype=np.float64).astype(dtype, copy=False)

    def uniform(self, low=0.0, high=1.0, shape=None, dtype=np.float64):
        out = self._gen.uniform(low, high, shape)
        return out if shape is None else out.astype(dtype, copy=False)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n, size=None, replace=True, p=None):
        return self._gen.choice(n, size=size, replace=replace, p=p)


def rng_normal(rng: Rng, shape, dtype=np.float32) -> Tensor:
    return Tensor(rng.normal(shape, dtype))
