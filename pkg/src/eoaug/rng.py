"""Deterministic random streams.

Everything random in the package draws from :class:`SplitMix64`. The n-th
output of a splitmix64 stream is ``mix(seed + n * GOLDEN)``, so blocks of
outputs can be produced with vectorized uint64 arithmetic while staying
bit-identical to the scalar recurrence.

Independent streams are keyed with :func:`derive`, e.g.
``derive(base_seed, class_id, image_index)`` for one generated image.
"""

from __future__ import annotations

import math
from typing import Union

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB
_TWO_NEG53 = 2.0**-53

Key = Union[int, str]


def mix64(z: int) -> int:
    """splitmix64 output finalizer on a Python int."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
    return z ^ (z >> np.uint64(31))


def fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & MASK64
    return h


def derive(seed: int, *keys: Key) -> int:
    """Derive a child seed from ``seed`` and a path of int/str keys."""
    h = mix64(seed & MASK64)
    for key in keys:
        k = fnv1a64(key) if isinstance(key, str) else int(key) & MASK64
        h = mix64(h ^ mix64((k + GOLDEN) & MASK64))
    return h


class SplitMix64:
    """A splitmix64 stream with numpy block helpers.

    Normals come from Box-Muller on pairs of 53-bit uniforms; both outputs of
    each pair are used, in order (cos branch first).
    """

    def __init__(self, seed: int):
        self.state = seed & MASK64

    @classmethod
    def from_keys(cls, seed: int, *keys: Key) -> "SplitMix64":
        return cls(derive(seed, *keys))

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN) & MASK64
        return mix64(self.state)

    def u64(self, n: int) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            states = np.uint64(self.state) + np.uint64(GOLDEN) * steps
            out = _mix64_array(states)
        self.state = (self.state + GOLDEN * n) & MASK64
        return out

    def uniform(self, shape=()) -> np.ndarray:
        """Uniforms in [0, 1) with 53 bits of resolution."""
        n = int(np.prod(shape, dtype=np.int64))
        bits = self.u64(n) >> np.uint64(11)
        return (bits.astype(np.float64) * _TWO_NEG53).reshape(shape)

    def random(self) -> float:
        return (self.next_u64() >> 11) * _TWO_NEG53

    def normal(self, shape=()) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        pairs = (n + 1) // 2
        raw = self.u64(2 * pairs) >> np.uint64(11)
        u1 = (raw[0::2].astype(np.float64) + 1.0) * _TWO_NEG53  # (0, 1], log-safe
        u2 = raw[1::2].astype(np.float64) * _TWO_NEG53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * math.pi * u2
        z = np.empty(2 * pairs)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        return z[:n].reshape(shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        """Integers in [low, high)."""
        if high <= low:
            raise ValueError(f"empty integer range [{low}, {high})")
        u = self.uniform(shape)
        return np.minimum(low + np.floor(u * (high - low)), high - 1).astype(np.int64)

    def randint(self, low: int, high: int) -> int:
        """Single integer in [low, high]."""
        return int(self.integers(low, high + 1))

    def uniform_range(self, low: float, high: float) -> float:
        return low + (high - low) * self.random()

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")
