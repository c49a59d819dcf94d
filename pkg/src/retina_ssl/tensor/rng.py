"""Counter-based random streams.

Every stream is a Philox generator keyed by ``(seed, *path)``. Deriving a
child with :meth:`RngStream.child` never consumes values from the parent, so
the draws for ``(seed, epoch, sample_index)`` do not depend on what else was
sampled before.
"""
from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


class RngStream:
    def __init__(self, seed: int, path: tuple = ()):
        self.seed = int(seed) & _MASK64
        self.path = tuple(int(p) & _MASK64 for p in path)
        seq = np.random.SeedSequence([self.seed, len(self.path), *self.path])
        self.gen = np.random.Generator(np.random.Philox(seq))

    def child(self, *keys: int) -> "RngStream":
        return RngStream(self.seed, self.path + tuple(keys))

    @property
    def counter(self) -> int:
        state = self.gen.bit_generator.state["state"]["counter"]
        return int(sum(int(c) << (64 * i) for i, c in enumerate(state)))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, path={self.path}, counter={self.counter})"

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        return (self.gen.standard_normal(shape) * std).astype(np.float32)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self.gen.uniform(low, high, size)

    def random(self) -> float:
        return float(self.gen.random())

    def integers(self, low: int, high: int | None = None, size=None):
        return self.gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

    def choice(self, n: int, size=None, replace: bool = True):
        return self.gen.choice(n, size=size, replace=replace)
