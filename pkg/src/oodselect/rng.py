"""Deterministic pseudo-random numbers shared by every stochastic component.

splitmix64 is the only generator used anywhere in this package: it is trivial
to reproduce bit-for-bit in any language, which keeps generated benchmarks,
seeded sampling and the random-selection baseline stable across platforms.
"""

from __future__ import annotations

import math

_MASK64 = 0xFFFFFFFFFFFFFFFF
_GAMMA = 0x9E3779B97F4A7C15


def _mix(z: int) -> int:
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 & _MASK64
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB & _MASK64
    return z ^ (z >> 31)


def derive_seed(seed: int, index: int) -> int:
    """Independent child seed: the (index+1)-th raw output of the stream."""
    return _mix((seed + (index + 1) * _GAMMA) & _MASK64)


class SplitMix64:
    """splitmix64 stream with doubles from the 53 high bits.

    Gaussians come from Box-Muller and consume exactly two uniforms per pair;
    the spare normal is cached so consumption stays reproducible.
    """

    def __init__(self, seed: int):
        self._state = seed & _MASK64
        self._spare: float | None = None

    def next_u64(self) -> int:
        self._state = (self._state + _GAMMA) & _MASK64
        return _mix(self._state)

    def next_float(self) -> float:
        # uniform in [0, 1)
        return (self.next_u64() >> 11) * 2.0**-53

    def next_below(self, n: int) -> int:
        return self.next_u64() % n

    def next_gauss(self) -> float:
        if self._spare is not None:
            z = self._spare
            self._spare = None
            return z
        # u1 in (0, 1] so the log is always defined
        u1 = ((self.next_u64() >> 11) + 1) * 2.0**-53
        u2 = self.next_float()
        r = math.sqrt(-2.0 * math.log(u1))
        self._spare = r * math.sin(2.0 * math.pi * u2)
        return r * math.cos(2.0 * math.pi * u2)

    def gauss_array(self, n: int):
        import numpy as np

        return np.array([self.next_gauss() for _ in range(n)], dtype=np.float64)

    def sample_indices(self, n: int, k: int) -> list[int]:
        """k distinct indices from range(n) by partial Fisher-Yates."""
        if k >= n:
            return list(range(n))
        idx = list(range(n))
        for i in range(k):
            j = i + self.next_below(n - i)
            idx[i], idx[j] = idx[j], idx[i]
        return idx[:k]
