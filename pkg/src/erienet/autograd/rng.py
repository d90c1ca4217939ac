"""Seeded random source.

Backed by numpy's PCG64 bit generator, whose output stream is fixed by
the algorithm and therefore identical across runs and platforms. Named
child streams are derived from ``(seed, crc32(name))`` so that one
parameter's draws never depend on which other parameters exist.
"""

from __future__ import annotations

import zlib
from typing import Any

import numpy as np


class Rng:
    def __init__(self, seed: int, key: tuple[int, ...] = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._key = key
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=key)
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def child(self, name: str) -> "Rng":
        return Rng(self.seed, self._key + (zlib.crc32(name.encode("utf-8")),))

    # -- draws ---------------------------------------------------------
    def uniform(self, low: float, high: float, shape=()) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def normal(self, mean: float = 0.0, std: float = 1.0, shape=()) -> np.ndarray:
        return self._gen.normal(mean, std, size=shape)

    def integers(self, low: int, high: int, shape=None):
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    # -- state ---------------------------------------------------------
    @property
    def state(self) -> dict[str, Any]:
        """JSON-serializable generator state."""
        return {"seed": self.seed, "key": list(self._key), "pcg64": self._gen.bit_generator.state}

    @classmethod
    def from_state(cls, state: dict[str, Any]) -> "Rng":
        rng = cls(state["seed"], tuple(state["key"]))
        rng._gen.bit_generator.state = state["pcg64"]
        return rng


def kaiming_uniform(rng: Rng, shape: tuple[int, ...], fan_in: int, dtype=np.float32) -> np.ndarray:
    """He-uniform init for relu layers: U(-b, b) with b = sqrt(6 / fan_in)."""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, shape).astype(dtype)
