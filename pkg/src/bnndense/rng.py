"""splitmix64, the single PRNG behind every stochastic component.

The generator is counter based: draw ``i`` (0-based) from state ``s`` is
``mix(s + (i + 1) * GAMMA)``, so long runs vectorize with numpy uint64
arithmetic and reproduce the scalar stream exactly.
"""
from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15


def mix64(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def _mix64_vec(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def stream_key(seed: int, index: int) -> int:
    """Starting state for sample ``index`` of a dataset seeded with ``seed``.

    ``index`` is spread by the golden-ratio constant before the xor so that
    different (seed, index) pairs do not alias; index 0 keys to ``seed`` itself.
    """
    return (seed ^ (index * GAMMA)) & MASK64


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + GAMMA) & MASK64
        return mix64(self.state)

    def u64(self, n: int) -> np.ndarray:
        """Next ``n`` raw outputs as a uint64 array."""
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * np.uint64(GAMMA)
            out = _mix64_vec(z)
        self.state = (self.state + n * GAMMA) & MASK64
        return out

    def random(self, n=None):
        """Uniform doubles in [0, 1) from the top 53 bits."""
        if n is None:
            return (self.next_u64() >> 11) * 2.0**-53
        return (self.u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def uniform(self, low: float, high: float, n=None):
        return low + (high - low) * self.random(n)

    def below(self, n: int) -> int:
        """Integer in ``[0, n)``."""
        return int(self.random() * n)

    def normal(self, n: int) -> np.ndarray:
        """Standard normals by Box-Muller over pairs of uniforms."""
        pairs = (n + 1) // 2
        u = self.random(2 * pairs).reshape(pairs, 2)
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        theta = 2.0 * np.pi * u[:, 1]
        return np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1).reshape(-1)[:n]

    def standard_normal(self, shape) -> np.ndarray:
        shape = (shape,) if np.isscalar(shape) else tuple(shape)
        return self.normal(int(np.prod(shape))).reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(n)``."""
        order = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.below(i + 1)
            order[i], order[j] = order[j], order[i]
        return np.array(order, dtype=np.int64)
