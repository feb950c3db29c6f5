"""Seedable, platform-portable random number generation.

Every stochastic component in the repo (weight init, noise draws, data
synthesis, batch order) draws from this generator so that runs are
bit-reproducible from a seed alone.  The algorithm is fixed:

* bit stream: SplitMix64 applied in counter mode -- output ``i`` is the
  SplitMix64 finalizer of ``key + (counter + i) * GOLDEN`` (pure uint64
  arithmetic, identical on every platform),
* uniforms: top 53 bits of the stream scaled to [0, 1),
* normals: Box-Muller over uniform pairs.

State is just ``(key, counter)``, which is what checkpoints serialize.
"""

from __future__ import annotations

import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
ALGORITHM = "splitmix64-counter/box-muller"

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_FNV_OFFSET = np.uint64(0xCBF29CE484222325)
_FNV_PRIME = np.uint64(0x100000001B3)


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _fnv1a(data: bytes) -> np.uint64:
    h = _FNV_OFFSET
    with np.errstate(over="ignore"):
        for b in data:
            h = (h ^ np.uint64(b)) * _FNV_PRIME
    return h


class Rng:
    """Counter-mode SplitMix64 stream with uniform/normal/integer draws."""

    def __init__(self, seed: int, counter: int = 0):
        self.key = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
        self.counter = int(counter)

    def state(self) -> dict:
        return {"algorithm": ALGORITHM, "key": int(self.key), "counter": self.counter}

    @classmethod
    def from_state(cls, state: dict) -> "Rng":
        if state.get("algorithm") != ALGORITHM:
            raise ValueError(f"unknown rng algorithm {state.get('algorithm')!r}")
        return cls(state["key"], state["counter"])

    def derive(self, *labels) -> "Rng":
        """Independent child stream keyed by the given labels.

        Used to make every (stage, step, purpose) combination its own
        stream, so resumed training replays the exact draw sequence.
        """
        key = self.key
        for label in labels:
            h = _fnv1a(str(label).encode("utf-8"))
            with np.errstate(over="ignore"):
                key = _mix(key ^ h ^ GOLDEN)
        return Rng(int(key))

    def _next(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter, self.counter + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            return _mix(self.key + (idx + np.uint64(1)) * GOLDEN)

    def uniform(self, shape=()) -> np.ndarray:
        """fp64 uniforms in [0, 1)."""
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        u = (self._next(n) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        return u.reshape(shape) if shape else u[0]

    def normal(self, shape=(), dtype=np.float32) -> np.ndarray:
        """Standard normals via Box-Muller."""
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        m = (n + 1) // 2
        u1 = 1.0 - (self._next(m) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        u2 = (self._next(m) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2.0 * np.pi * u2), r * np.sin(2.0 * np.pi * u2)])[:n]
        z = z.astype(dtype)
        return z.reshape(shape) if shape else z[0]

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        """Integers in [low, high)."""
        if high <= low:
            raise ValueError(f"empty integer range [{low}, {high})")
        u = self.uniform(shape if shape else (1,))
        out = (low + np.floor(u * (high - low))).astype(np.int64)
        return out.reshape(shape) if shape else int(out[0])

    def permutation(self, n: int) -> np.ndarray:
        # argsort of a uniform key vector; stable kind pins tie order.
        return np.argsort(self.uniform((n,)), kind="stable")

    def choice(self, n: int, size: int) -> np.ndarray:
        """``size`` indices drawn with replacement from range(n)."""
        return self.integers(0, n, (size,))
