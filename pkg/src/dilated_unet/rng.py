"""Portable deterministic random numbers.

The generator is xoshiro256** run on 64 independent lanes in lock-step, each
lane seeded from consecutive splitmix64 outputs of the user seed.  One step
yields 64 words, consumed lane 0 first.  Everything is unsigned 64-bit
integer arithmetic, so a seed produces the same stream on every platform.
"""

from __future__ import annotations

import math

import numpy as np

_MASK = (1 << 64) - 1
_LANES = 64


def splitmix64(state: int) -> tuple[int, int]:
    """Advance a splitmix64 state; returns ``(new_state, output)``."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return state, z ^ (z >> 31)


def _rotl(x: np.ndarray, k: int) -> np.ndarray:
    return (x << np.uint64(k)) | (x >> np.uint64(64 - k))


class Rng:
    def __init__(self, seed: int):
        self.seed = int(seed)
        state = self.seed & _MASK
        words = []
        for _ in range(4 * _LANES):
            state, z = splitmix64(state)
            words.append(z)
        s = np.array(words, dtype=np.uint64).reshape(_LANES, 4).T.copy()
        self._s = [s[0], s[1], s[2], s[3]]
        self._buf = np.empty(0, dtype=np.uint64)

    def _step(self) -> np.ndarray:
        s0, s1, s2, s3 = self._s
        result = _rotl(s1 * np.uint64(5), 7) * np.uint64(9)
        t = s1 << np.uint64(17)
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        self._s[3] = _rotl(s3, 45)
        return result

    def bits(self, n: int) -> np.ndarray:
        """Next ``n`` raw 64-bit words."""
        chunks = [self._buf]
        have = self._buf.size
        while have < n:
            out = self._step()
            chunks.append(out)
            have += out.size
        stream = np.concatenate(chunks)
        self._buf = stream[n:]
        return stream[:n]

    def uniform(self, n: int) -> np.ndarray:
        """``n`` float64 values in ``[0, 1)`` with 53 random bits each."""
        return (self.bits(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))

    def integers(self, high: int, n: int) -> np.ndarray:
        """``n`` integers uniform on ``[0, high)``."""
        return np.minimum((self.uniform(n) * high).astype(np.int64), high - 1)

    def randint(self, high: int) -> int:
        return int(self.integers(high, 1)[0])

    def normal(self, n: int) -> np.ndarray:
        """Standard normals via Box-Muller (cosine branch only)."""
        u = self.uniform(2 * n).reshape(2, n) if n else np.zeros((2, 0))
        r = np.sqrt(-2.0 * np.log1p(-u[0]))
        return r * np.cos(2.0 * math.pi * u[1])

    def trunc_normal(self, shape, std: float, bound: float = 2.0) -> np.ndarray:
        """Normal(0, std) truncated to ``|z| <= bound`` standard deviations, by rejection."""
        n = math.prod(shape)
        out = np.empty(0)
        while out.size < n:
            z = self.normal(n - out.size)
            out = np.concatenate([out, z[np.abs(z) <= bound]])
        return (out * std).reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        perm = np.arange(n)
        draws = self.uniform(max(n - 1, 0))
        for j, i in enumerate(range(n - 1, 0, -1)):
            k = min(int(draws[j] * (i + 1)), i)
            perm[i], perm[k] = perm[k], perm[i]
        return perm
