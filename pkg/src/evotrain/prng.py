"""Deterministic 64-bit PRNG used for all synthetic data and draws.

splitmix64 with the canonical constants. Uniform floats take the 24 high
bits of each output so every value is exactly representable in float32.
This definition is normative for reproducibility: two runs with the same
seed produce bit-identical streams on any platform.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB


def splitmix64(seed: int, n: int = 1) -> list[int]:
    """First ``n`` outputs of the splitmix64 sequence seeded with ``seed``."""
    state = seed & MASK64
    out = []
    for _ in range(n):
        state = (state + GAMMA) & MASK64
        z = state
        z = ((z ^ (z >> 30)) * MIX1) & MASK64
        z = ((z ^ (z >> 27)) * MIX2) & MASK64
        z ^= z >> 31
        out.append(z)
    return out


class Prng:
    """Stateful stream over splitmix64 outputs."""

    def __init__(self, seed: int):
        self._state = seed & MASK64

    def next_u64(self) -> int:
        self._state = (self._state + GAMMA) & MASK64
        z = self._state
        z = ((z ^ (z >> 30)) * MIX1) & MASK64
        z = ((z ^ (z >> 27)) * MIX2) & MASK64
        return z ^ (z >> 31)

    def uniform(self, shape, low: float = -1.0, high: float = 1.0) -> np.ndarray:
        """Uniform floats in [low, high) from the 24 high bits of each draw."""
        n = int(np.prod(shape)) if shape else 1
        u = np.empty(n, dtype=np.float64)
        for i in range(n):
            u[i] = (self.next_u64() >> 40) / float(1 << 24)
        arr = (low + (high - low) * u).astype(np.float32)
        return arr.reshape(shape)
