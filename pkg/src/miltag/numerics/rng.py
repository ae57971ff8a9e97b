"""Deterministic counter-based random number generation.

Output ``i`` of a stream is the splitmix64 finalizer applied to
``seed + (i+1) * golden`` modulo 2**64, so a stream is a pure function of
(seed, counter) and the same seed always yields bit-identical draws, on
any platform.  Uniforms take the top 53 bits shifted to bin centres, so
they lie strictly inside (0, 1).  Normals are produced by applying a
rational approximation of the standard normal quantile to uniforms.
"""
import numpy as np

from ..errors import ConfigError
from .special import norm_quantile_approx

_M64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _mix64(z: int) -> int:
    z &= _M64
    z ^= z >> 30
    z = (z * 0xBF58476D1CE4E5B9) & _M64
    z ^= z >> 27
    z = (z * 0x94D049BB133111EB) & _M64
    z ^= z >> 31
    return z


def _mix64_vec(z: np.ndarray) -> np.ndarray:
    z = z.astype(np.uint64, copy=True)
    z ^= z >> np.uint64(30)
    z *= np.uint64(0xBF58476D1CE4E5B9)
    z ^= z >> np.uint64(27)
    z *= np.uint64(0x94D049BB133111EB)
    z ^= z >> np.uint64(31)
    return z


def _fnv1a(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) & _M64
    return h


class Rng:
    """A deterministic stream addressed by a 64-bit seed and a counter."""

    def __init__(self, seed: int):
        if not isinstance(seed, int) or isinstance(seed, bool):
            raise ConfigError(f"seed must be an integer, got {type(seed).__name__}")
        self.seed = seed & _M64
        self.counter = 0

    def u64(self, n: int) -> np.ndarray:
        """Next n raw 64-bit outputs, advancing the counter by n."""
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        return _mix64_vec(np.uint64(self.seed) + idx * np.uint64(_GOLDEN))

    def uniform(self, shape) -> np.ndarray:
        """Uniform draws in the open interval (0, 1)."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = 1
        for s in shape:
            n *= s
        u = self.u64(n)
        vals = ((u >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53
        return vals.reshape(shape)

    def normal(self, shape, mean: float = 0.0, sigma: float = 1.0) -> np.ndarray:
        return mean + sigma * norm_quantile_approx(self.uniform(shape))

    def integers(self, n: int, upper: int) -> np.ndarray:
        """n draws from {0, ..., upper-1}; bias is below 2**-53 * upper."""
        if upper <= 0:
            raise ConfigError("upper must be positive")
        draws = (self.uniform(n) * upper).astype(np.int64)
        return np.minimum(draws, upper - 1)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable").astype(np.int64)

    def spawn(self, tag: str) -> "Rng":
        """Independent child stream; depends on the seed and tag only."""
        return Rng(_mix64(self.seed ^ _mix64(_fnv1a(tag.encode("utf-8")))))
