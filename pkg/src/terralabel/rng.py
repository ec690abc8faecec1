"""Deterministic 64-bit RNG (splitmix64) with named substreams.

Every stochastic step in the pipeline draws from an Rng64 seeded through
``stream_seed``, never from global or wall-clock state, so identical inputs
and master seed reproduce identical outputs regardless of execution order
or worker count.

splitmix64 has the convenient property that output ``i`` is a pure function
of ``seed + (i+1) * GAMMA``, which lets bulk draws be vectorized with numpy
while remaining bit-identical to the scalar ``next_u64`` sequence.
"""

from __future__ import annotations

import math

import numpy as np

MASK64 = 0xFFFFFFFFFFFFFFFF
GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3

# 53-bit mantissa scaling for uniform doubles in (0, 1].
_INV_2_53 = 1.0 / (1 << 53)


def mix64(x: int) -> int:
    """splitmix64 output finalizer: two xorshift-multiply rounds plus a final shift."""
    x &= MASK64
    x = ((x ^ (x >> 30)) * _MIX1) & MASK64
    x = ((x ^ (x >> 27)) * _MIX2) & MASK64
    return x ^ (x >> 31)


def _fnv1a64(text: str) -> int:
    h = _FNV_OFFSET
    for byte in text.encode("ascii"):
        h = ((h ^ byte) * _FNV_PRIME) & MASK64
    return h


def stream_seed(master: int, tag: str, *indices: int) -> int:
    """Derive the seed of the substream named ``tag`` (plus optional indices).

    Streams for distinct tags or indices are decorrelated by re-mixing, so
    e.g. block 17's BLOCK_PICK stream is independent of execution order.
    """
    s = mix64((master & MASK64) ^ _fnv1a64(tag))
    for idx in indices:
        s = mix64(s ^ (idx & MASK64))
    return s


class Rng64:
    """splitmix64 generator.

    Bounded draws use ``value mod n``; the modulo bias is negligible for
    n much smaller than 2**64 and keeps the draw cross-platform trivial.
    """

    __slots__ = ("state", "_gauss_spare")

    def __init__(self, seed: int):
        self.state = seed & MASK64
        self._gauss_spare: float | None = None

    def next_u64(self) -> int:
        self.state = (self.state + GAMMA) & MASK64
        return mix64(self.state)

    def randbelow(self, n: int) -> int:
        if n < 1:
            raise ValueError(f"randbelow requires n >= 1, got {n}")
        return self.next_u64() % n

    def uniform(self) -> float:
        """Uniform double in (0, 1]; never 0, safe under log()."""
        return ((self.next_u64() >> 11) + 1) * _INV_2_53

    def gauss(self) -> float:
        """Standard normal via Box-Muller; draws two uniforms per pair."""
        if self._gauss_spare is not None:
            z = self._gauss_spare
            self._gauss_spare = None
            return z
        u1 = self.uniform()
        u2 = self.uniform()
        r = math.sqrt(-2.0 * math.log(u1))
        theta = 2.0 * math.pi * u2
        self._gauss_spare = r * math.sin(theta)
        return r * math.cos(theta)

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randbelow(i + 1)
            items[i], items[j] = items[j], items[i]

    def sample_indices(self, population: int, k: int) -> list[int]:
        """k distinct indices from range(population), via partial Fisher-Yates."""
        if not 0 <= k <= population:
            raise ValueError(f"cannot sample {k} from {population}")
        pool = list(range(population))
        for i in range(k):
            j = i + self.randbelow(population - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k]

    def draw_u64(self, n: int) -> np.ndarray:
        """Next ``n`` outputs as a uint64 array; advances state exactly as
        ``n`` scalar ``next_u64`` calls would."""
        if n < 0:
            raise ValueError("draw count must be >= 0")
        idx = np.arange(1, n + 1, dtype=np.uint64)
        states = np.uint64(self.state) + idx * np.uint64(GAMMA)
        self.state = (self.state + n * GAMMA) & MASK64
        return mix64_vec(states)

    def draw_gauss(self, n: int) -> np.ndarray:
        """Next ``n`` standard normals (float64), Box-Muller over pairs.

        Consumes 2*ceil(n/2) uniform draws; any unused spare is discarded,
        so bulk and scalar paths are interleave-compatible only per call.
        """
        pairs = (n + 1) // 2
        u = (self.draw_u64(2 * pairs) >> np.uint64(11)).astype(np.float64)
        u = (u + 1.0) * _INV_2_53
        u1 = u[0::2]
        u2 = u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        theta = (2.0 * math.pi) * u2
        out = np.empty(2 * pairs, dtype=np.float64)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:n]


def mix64_vec(states: np.ndarray) -> np.ndarray:
    """Vectorized mix64 over a uint64 array."""
    z = states.astype(np.uint64, copy=True)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    return z ^ (z >> np.uint64(31))


def stream_first_draws(master: int, tag: str, indices: np.ndarray) -> np.ndarray:
    """First output of stream (master, tag, i) for every i in ``indices``.

    Bit-identical to ``Rng64(stream_seed(master, tag, i)).next_u64()``; used
    where one bounded draw per grid block would otherwise cost a Python loop.
    """
    base = np.uint64(mix64((master & MASK64) ^ _fnv1a64(tag)))
    seeds = mix64_vec(base ^ indices.astype(np.uint64))
    return mix64_vec(seeds + np.uint64(GAMMA))
