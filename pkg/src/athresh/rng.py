"""Portable seedable random source.

SplitMix64 (Steele, Lea & Flood 2014): 64-bit state advanced by the golden
gamma 0x9E3779B97F4A7C15, outputs passed through the standard two-multiply
finalizer. Because each output depends only on ``state + i * gamma`` the
bulk generators below are vectorized with wrapping uint64 arithmetic and
produce exactly the same stream as repeated scalar calls.

Conversions:
  uniform   = (u64 >> 11) * 2**-53            in [0, 1)
  normal    = Box-Muller on (1 - u1, u2), cosine branch only, one output
              per pair of uniforms
  below(n)  = (u64 * n) >> 64                  (multiply-shift)
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB


def mix64(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


def _fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * 0x100000001B3) & MASK64
    return h


class SplitMix64:
    def __init__(self, seed: int):
        self.state = int(seed) & MASK64

    def fork(self, tag: str) -> "SplitMix64":
        """Independent child stream keyed by ``tag``; does not advance self."""
        return SplitMix64(mix64(self.state ^ _fnv1a64(tag)))

    def next_u64(self) -> int:
        self.state = (self.state + GAMMA) & MASK64
        return mix64(self.state)

    def uniform(self, low: float = 0.0, high: float = 1.0) -> float:
        u = (self.next_u64() >> 11) * 2.0**-53
        return low + (high - low) * u

    def below(self, n: int) -> int:
        if n <= 0:
            raise ValueError(f"below() needs n >= 1, got {n}")
        return (self.next_u64() * n) >> 64

    def u64_array(self, n: int) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * np.uint64(GAMMA)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
            z = z ^ (z >> np.uint64(31))
        self.state = (self.state + n * GAMMA) & MASK64
        return z

    def uniform_array(self, n: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        u = (self.u64_array(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return low + (high - low) * u

    def normal_array(self, n: int) -> np.ndarray:
        u = self.uniform_array(2 * n)
        u1 = 1.0 - u[0::2]
        u2 = u[1::2]
        return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates."""
        for i in range(len(items) - 1, 0, -1):
            j = self.below(i + 1)
            items[i], items[j] = items[j], items[i]
