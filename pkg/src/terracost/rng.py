"""SplitMix64 random streams.

All randomness in the package flows through :class:`SplitMix64`, Steele et al.'s
64-bit generator (state advances by the golden-ratio increment, output is the
``mix64`` finaliser of the state).  Because the state sequence is an arithmetic
progression, a block of ``n`` outputs is computed in one vectorised step, which
keeps generation bit-identical across platforms and numpy versions.

Child streams are derived with :func:`derive_seed`, so that e.g. the noise for
sample ``i`` and layer ``k`` never depends on how many other draws happened.
"""

from __future__ import annotations

import numpy as np

GAMMA = 0x9E3779B97F4A7C15
_MASK = (1 << 64) - 1
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix_array(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def mix64(z: int) -> int:
    z &= _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def derive_seed(seed: int, *tags: int | str) -> int:
    """Deterministically combine a seed with integer or string tags."""
    h = mix64(seed + GAMMA)
    for tag in tags:
        if isinstance(tag, str):
            for b in tag.encode("utf-8"):
                h = mix64(h ^ b)
            h = mix64(h + GAMMA)
        else:
            h = mix64(h ^ mix64((int(tag) + GAMMA) & _MASK))
    return h


class SplitMix64:
    def __init__(self, seed: int):
        self.state = int(seed) & _MASK

    def u64(self, n: int) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            states = np.uint64(self.state) + steps * np.uint64(GAMMA)
        self.state = (self.state + n * GAMMA) & _MASK
        return _mix_array(states)

    def random(self, n: int) -> np.ndarray:
        """Uniform doubles in [0, 1) with 53 random bits."""
        return (self.u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))

    def uniform(self, low: float, high: float, n: int) -> np.ndarray:
        return low + (high - low) * self.random(n)

    def normal(self, n: int) -> np.ndarray:
        """Standard normals by Box-Muller; consumes two uniforms per output."""
        u = self.random(2 * n)
        u1 = 1.0 - u[:n]
        u2 = u[n:]
        return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)

    def integers(self, low: int, high: int, n: int) -> np.ndarray:
        span = high - low
        if span <= 0:
            raise ValueError("empty integer range")
        return low + np.minimum((self.random(n) * span).astype(np.int64), span - 1)

    def permutation(self, n: int) -> np.ndarray:
        keys = self.u64(n)
        return np.argsort(keys, kind="stable")
