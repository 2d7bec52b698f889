"""Deterministic pseudo-random numbers from the splitmix64 recurrence.

A 64-bit-state generator keeps every sampling decision in the toolkit
reproducible bit-for-bit across runs and across languages.  numpy's own
Generator is avoided on purpose: its stream identity is not something we
can freeze into portable test vectors.

The state jump is linear (state_i = seed + i * GAMMA mod 2**64), so whole
blocks of outputs can be produced vectorized while staying identical to
the one-at-a-time stream.
"""

from __future__ import annotations

import math

import numpy as np

_MASK = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


class Rng:
    """splitmix64 stream with uniform, integer, and gaussian helpers."""

    __slots__ = ("state",)

    def __init__(self, seed: int):
        self.state = seed & _MASK

    def next_u64(self) -> int:
        self.state = (self.state + _GAMMA) & _MASK
        z = self.state
        z = ((z ^ (z >> 30)) * _MIX1) & _MASK
        z = ((z ^ (z >> 27)) * _MIX2) & _MASK
        return z ^ (z >> 31)

    def u64_array(self, count: int) -> np.ndarray:
        """The next `count` raw outputs, identical to repeated next_u64()."""
        if count < 0:
            raise ValueError("count must be nonnegative")
        steps = np.arange(1, count + 1, dtype=np.uint64) * np.uint64(_GAMMA)
        z = np.uint64(self.state) + steps
        self.state = (self.state + count * _GAMMA) & _MASK
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        return z ^ (z >> np.uint64(31))

    def uniform(self) -> float:
        """Uniform in [0, 1) using the top 53 bits."""
        return (self.next_u64() >> 11) * 2.0 ** -53

    def uniform_array(self, count: int) -> np.ndarray:
        return (self.u64_array(count) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53

    def randint(self, n: int) -> int:
        """Integer in [0, n).  Modulo bias is negligible for n << 2**64."""
        if n <= 0:
            raise ValueError("randint needs a positive bound")
        return self.next_u64() % n

    def normal_array(self, shape, scale: float = 1.0) -> np.ndarray:
        """Standard gaussians via Box-Muller, two uniforms per sample.

        Only the cosine branch is used; the stream position after filling
        `count` samples is exactly 2*count raw outputs.
        """
        count = int(np.prod(shape))
        u = self.uniform_array(2 * count)
        radius = np.sqrt(-2.0 * np.log(1.0 - u[0::2]))
        angle = 2.0 * math.pi * u[1::2]
        return (scale * radius * np.cos(angle)).reshape(shape)

    def normal(self) -> float:
        return float(self.normal_array((1,))[0])
