"""Seeded PCG32 generator with splitmix64 seeding.

The scalar methods and the ``*_array`` methods consume the same stream: drawing
``n`` values with ``uniform_array(n)`` leaves the generator in the same state
as ``n`` calls to ``next_f32()``. The array path jumps the LCG with precomputed
affine coefficients so bulk draws (dropout masks, image noise) stay fast.
"""

from __future__ import annotations

import math

import numpy as np

MASK64 = (1 << 64) - 1
PCG_MULT = 6364136223846793005
PCG_INC = 1442695040888963407  # fixed odd increment

_BLOCK = 8192


def splitmix64(x: int) -> int:
    """One splitmix64 output for input state ``x``."""
    z = (x + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & MASK64
    h = 0xCBF29CE484222325  # FNV-1a over the utf-8 bytes
    for b in str(key).encode("utf-8"):
        h = ((h ^ b) * 0x100000001B3) & MASK64
    return h


def derive_seed(seed: int, *keys) -> int:
    """Derive an independent 64-bit seed from ``seed`` and a path of keys.

    Keys may be ints or strings. ``derive_seed(s, i)`` is the per-index
    stream used by dataset generation.
    """
    h = splitmix64(int(seed) & MASK64)
    for key in keys:
        h = splitmix64(h ^ splitmix64(_key_to_int(key)))
    return h


def _jump_tables(n: int) -> tuple[np.ndarray, np.ndarray]:
    # state_k = mult[k] * state_0 + add[k]  (mod 2**64), k = 0..n
    mult = np.empty(n + 1, dtype=np.uint64)
    add = np.empty(n + 1, dtype=np.uint64)
    a, c = 1, 0
    for k in range(n + 1):
        mult[k] = a
        add[k] = c
        a = (a * PCG_MULT) & MASK64
        c = (c * PCG_MULT + PCG_INC) & MASK64
    return mult, add


_MULT, _ADD = _jump_tables(_BLOCK)


def _output(states: np.ndarray) -> np.ndarray:
    xorshifted = (((states >> np.uint64(18)) ^ states) >> np.uint64(27)) & np.uint64(0xFFFFFFFF)
    rot = (states >> np.uint64(59)).astype(np.uint32)
    x = xorshifted.astype(np.uint32)
    return (x >> rot) | (x << ((np.uint32(32) - rot) & np.uint32(31)))


class Rng:
    """PCG32 (XSH-RR variant) seeded through splitmix64."""

    def __init__(self, seed: int = 0):
        init = splitmix64(int(seed) & MASK64)
        # pcg32_srandom with the fixed stream
        self.state = 0
        self._step()
        self.state = (self.state + init) & MASK64
        self._step()

    def _step(self) -> None:
        self.state = (self.state * PCG_MULT + PCG_INC) & MASK64

    def next_u32(self) -> int:
        old = self.state
        self._step()
        xorshifted = (((old >> 18) ^ old) >> 27) & 0xFFFFFFFF
        rot = old >> 59
        return ((xorshifted >> rot) | (xorshifted << ((32 - rot) & 31))) & 0xFFFFFFFF

    def next_f32(self) -> float:
        """Uniform float in [0, 1) with 24 bits of resolution."""
        return (self.next_u32() >> 8) * (1.0 / 16777216.0)

    def uniform(self, lo: float, hi: float) -> float:
        if lo == hi:
            self.next_u32()
            return lo
        return lo + (hi - lo) * self.next_f32()

    def normal(self) -> float:
        """Standard normal via Box-Muller; the sine branch is discarded."""
        u1 = self.next_f32()
        u2 = self.next_f32()
        return math.sqrt(-2.0 * math.log1p(-u1)) * math.cos(2.0 * math.pi * u2)

    def randint(self, n: int) -> int:
        """Integer in [0, n) by multiply-shift (bias < n / 2**32)."""
        return (self.next_u32() * n) >> 32

    def u32_array(self, n: int) -> np.ndarray:
        out = np.empty(n, dtype=np.uint32)
        pos = 0
        while pos < n:
            k = min(_BLOCK, n - pos)
            s = np.array([self.state], dtype=np.uint64)
            states = _MULT[:k] * s + _ADD[:k]
            out[pos : pos + k] = _output(states)
            self.state = int((_MULT[k : k + 1] * s + _ADD[k : k + 1])[0])
            pos += k
        return out

    def uniform_array(self, n: int) -> np.ndarray:
        """``n`` draws equal to successive ``next_f32()`` values (float64)."""
        return (self.u32_array(n) >> np.uint32(8)).astype(np.float64) * (1.0 / 16777216.0)

    def normal_array(self, n: int) -> np.ndarray:
        u = self.uniform_array(2 * n).reshape(n, 2)
        return np.sqrt(-2.0 * np.log1p(-u[:, 0])) * np.cos(2.0 * np.pi * u[:, 1])

    def permutation(self, n: int) -> list[int]:
        """Fisher-Yates shuffle of ``range(n)``."""
        idx = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.randint(i + 1)
            idx[i], idx[j] = idx[j], idx[i]
        return idx
