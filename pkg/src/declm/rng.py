"""Seeded pseudo-random source owned by the library.

Counter-based xorshift-multiply generator (splitmix64 mixing function):
every draw is a pure function of (seed, counter), so streams are
reproducible bit-for-bit across platforms and can be vectorised with
numpy's wrapping uint64 arithmetic. Nothing in the library touches the
ambient `random` or `numpy.random` state.
"""

from __future__ import annotations

import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = 0xFFFFFFFFFFFFFFFF
_INV_2_53 = float(2.0**-53)


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


class Rng:
    """Deterministic stream of numbers derived from an integer seed."""

    def __init__(self, seed: int):
        key = np.asarray([seed & _MASK64], dtype=np.uint64)
        self._key = _mix(key ^ _GAMMA)[0]
        self._counter = 0

    def spawn(self, tag: int) -> "Rng":
        """Derive an independent child stream; same (seed, tag) -> same stream."""
        base = np.asarray([(tag & _MASK64)], dtype=np.uint64)
        child = _mix((base + np.uint64(1)) * _GAMMA ^ self._key)[0]
        return Rng(int(child))

    def _block(self, n: int) -> np.ndarray:
        idx = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
        self._counter += n
        return _mix(idx * _GAMMA + self._key)

    def next_u64(self) -> int:
        return int(self._block(1)[0])

    def uniform(self, lo: float = 0.0, hi: float = 1.0, size=None) -> np.ndarray | float:
        """Uniform draw in [lo, hi) as float64 (scalar when size is None)."""
        n = 1 if size is None else int(np.prod(size))
        u = (self._block(n) >> np.uint64(11)).astype(np.float64) * _INV_2_53
        out = lo + (hi - lo) * u
        if size is None:
            return float(out[0])
        return out.reshape(size)

    def normal(self, mean: float = 0.0, std: float = 1.0, size=None) -> np.ndarray | float:
        """Gaussian draws via Box-Muller on paired uniforms."""
        n = 1 if size is None else int(np.prod(size))
        m = (n + 1) // 2
        bits = self._block(2 * m)
        # u1 in (0, 1] so log() is safe; u2 in [0, 1)
        u1 = ((bits[:m] >> np.uint64(11)).astype(np.float64) + 1.0) * _INV_2_53
        u2 = (bits[m:] >> np.uint64(11)).astype(np.float64) * _INV_2_53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        out = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        out = mean + std * out
        if size is None:
            return float(out[0])
        return out.reshape(size)

    def randint(self, n: int) -> int:
        """Unbiased integer in [0, n) by rejection sampling."""
        if n <= 0:
            raise ValueError("randint bound must be positive")
        limit = (_MASK64 + 1) - ((_MASK64 + 1) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]

    def permutation(self, n: int) -> list[int]:
        order = list(range(n))
        self.shuffle(order)
        return order

    def choice_weighted(self, weights) -> int:
        """Index drawn proportionally to non-negative weights."""
        w = np.asarray(weights, dtype=np.float64)
        total = float(w.sum())
        if total <= 0.0:
            raise ValueError("weights must have positive total")
        u = self.uniform(0.0, total)
        return int(np.searchsorted(np.cumsum(w), u, side="right").clip(0, len(w) - 1))
