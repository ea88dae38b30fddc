"""
Seeded random number generation.

All randomness in the pipeline (weight init, dropout masks, shuffling,
scene rendering) flows through ``Rng``, a thin wrapper over numpy's Philox
counter-based bit generator. Children are derived with ``SeedSequence``
spawn keys, so a named child stream never depends on how much the parent
has been consumed.
"""

import zlib

import numpy as np


class Rng:
    """Philox-backed generator identified by ``seed`` and a spawn path."""

    algorithm = "philox4x64-10"

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        if seed < 0 or seed >= 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.path = tuple(path)
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        self._gen = np.random.Generator(np.random.Philox(seq))

    def child(self, name: str | int) -> "Rng":
        """Independent stream keyed by ``name`` (stable across runs)."""
        key = name if isinstance(name, int) else zlib.crc32(name.encode("utf-8"))
        return Rng(self.seed, self.path + (int(key),))

    def split(self, n: int) -> list["Rng"]:
        return [self.child(i) for i in range(n)]

    # --- draws ---

    def uniform(self, low: float, high: float, shape: tuple[int, ...]) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape).astype(np.float64)

    def normal(self, mean: float, std: float, shape: tuple[int, ...]) -> np.ndarray:
        return self._gen.normal(mean, std, size=shape).astype(np.float64)

    def random(self, shape: tuple[int, ...]) -> np.ndarray:
        return self._gen.random(size=shape)

    def integers(self, low: int, high: int, size: int | tuple[int, ...] | None = None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, items: list, size: int | None = None, replace: bool = True):
        idx = self._gen.choice(len(items), size=size, replace=replace)
        if size is None:
            return items[int(idx)]
        return [items[int(i)] for i in idx]

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={self.path})"
