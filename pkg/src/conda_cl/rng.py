"""SplitMix64 random streams.

SplitMix64 is counter based: the i-th output of a stream is a fixed mixing
function of ``state + i * GAMMA``, so a block of draws is computed with one
vectorised numpy expression and the results do not depend on the platform.
"""

import numpy as np

GAMMA = 0x9E3779B97F4A7C15
_MASK = (1 << 64) - 1


def _mix64(z):
    # Stafford variant 13; operates on uint64 arrays and wraps mod 2**64.
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def mix64(x: int) -> int:
    """Scalar SplitMix64 finaliser."""
    with np.errstate(over="ignore"):
        return int(_mix64(np.array([x & _MASK], dtype=np.uint64))[0])


class Rng:
    """A deterministic SplitMix64 stream.

    ``child(i)`` derives an independent stream from ``(seed, i)`` without
    touching the parent's state, so per-sample streams can be created in any
    order.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK
        self.state = self.seed

    def child(self, index: int) -> "Rng":
        return Rng(mix64(mix64(self.seed) ^ ((index * 0xD1B54A32D192ED69 + 1) & _MASK)))

    def next_u64(self, n: int) -> np.ndarray:
        n = int(n)
        with np.errstate(over="ignore"):
            k = np.arange(1, n + 1, dtype=np.uint64)
            z = np.uint64(self.state) + k * np.uint64(GAMMA)
            out = _mix64(z)
        self.state = (self.state + n * GAMMA) & _MASK
        return out

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        shape = tuple(np.atleast_1d(shape)) if not isinstance(shape, tuple) else shape
        n = int(np.prod(shape)) if shape else 1
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        return (low + (high - low) * u).reshape(shape)

    def normal(self, shape) -> np.ndarray:
        """Standard normal draws via Box-Muller (two uniforms per output)."""
        shape = tuple(np.atleast_1d(shape)) if not isinstance(shape, tuple) else shape
        n = int(np.prod(shape)) if shape else 1
        u = self.uniform((2, n))
        u1 = 1.0 - u[0]  # in (0, 1]
        r = np.sqrt(-2.0 * np.log(u1))
        return (r * np.cos(2.0 * np.pi * u[1])).reshape(shape)

    def integers(self, low: int, high: int, size=None):
        """Integers in [low, high). Returns a python int when size is None."""
        n = 1 if size is None else int(np.prod(size))
        span = high - low
        if span <= 0:
            raise ValueError("empty integer range")
        vals = low + np.floor(self.uniform((n,)) * span).astype(np.int64)
        vals = np.minimum(vals, high - 1)
        if size is None:
            return int(vals[0])
        return vals.reshape(size)

    def permutation(self, n: int) -> np.ndarray:
        # argsort of uniform keys; ties have probability ~2**-53
        return np.argsort(self.uniform((n,)), kind="stable")

    def rotation(self, d: int) -> np.ndarray:
        """Random orthogonal d x d matrix (QR of a Gaussian matrix, sign-fixed)."""
        a = self.normal((d, d))
        q, r = np.linalg.qr(a)
        return q * np.sign(np.diag(r))
