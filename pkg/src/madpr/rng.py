"""Portable counter-based random numbers.

Every synthetic corpus and every random start vector in this package comes
from :class:`CounterRNG`, so the streams can be reproduced bit-for-bit in any
language with 64-bit unsigned integer arithmetic.

Algorithm
---------
``key = splitmix64_mix(seed + GOLDEN)`` where ``GOLDEN = 0x9E3779B97F4A7C15``.
The ``i``-th raw word (counter ``i = 0, 1, 2, ...``) is::

    mix(key + (i + 1) * GOLDEN)        (all arithmetic modulo 2**64)

with the SplitMix64 finalizer::

    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    z =  z ^ (z >> 31)

Uniforms in ``[0, 1)`` are ``(word >> 11) * 2**-53``.  A standard normal
consumes two consecutive words ``(w1, w2)`` and is the cosine branch of
Box-Muller: ``sqrt(-2 ln(1 - u1)) * cos(2 pi u2)``.  Draws are taken in
row-major order and the counter advances by the number of words consumed.
"""

from __future__ import annotations

import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_TWO_POW_53 = float(2**53)


def splitmix64_mix(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


class CounterRNG:
    """Deterministic stream of uniforms and normals keyed by an integer seed."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        with np.errstate(over="ignore"):
            self._key = splitmix64_mix(np.uint64(self.seed % 2**64) + GOLDEN)
        self.counter = 0

    def words(self, n: int) -> np.ndarray:
        i = np.arange(self.counter + 1, self.counter + 1 + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            return splitmix64_mix(self._key + i * GOLDEN)

    def uniform(self, size, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        shape = (size,) if np.isscalar(size) else tuple(size)
        n = int(np.prod(shape))
        u = (self.words(n) >> np.uint64(11)).astype(np.float64) / _TWO_POW_53
        return (low + (high - low) * u).reshape(shape)

    def normal(self, size) -> np.ndarray:
        shape = (size,) if np.isscalar(size) else tuple(size)
        n = int(np.prod(shape))
        w = (self.words(2 * n) >> np.uint64(11)).astype(np.float64) / _TWO_POW_53
        u1, u2 = w[0::2], w[1::2]
        z = np.sqrt(-2.0 * np.log1p(-u1)) * np.cos(2.0 * np.pi * u2)
        return z.reshape(shape)
