"""Counter-based deterministic random streams.

Every random quantity in the package is drawn from Philox-4x64-10
(``numpy.random.Philox``) keyed by ``(seed, stream)`` with the counter
starting at zero.  Only the raw 64-bit words are consumed: numpy pins the
bit stream of its BitGenerators across versions but not the output of
``Generator`` distribution methods, so every conversion to floats happens
here with fixed arithmetic.

Stream ids are ``(purpose << 32) | index`` so that independent consumers
(weight init per segment, dataset structure, per-epoch permutations) never
share counters.
"""

from __future__ import annotations

import numpy as np
from scipy import special

_U64 = 1 << 64

# purpose tags for stream ids
INIT = 1
DATA_STRUCTURE = 2
DATA_SAMPLES = 3
PERMUTATION = 4


def stream_id(purpose: int, index: int = 0) -> int:
    if not 0 <= purpose < (1 << 32) or not 0 <= index < (1 << 32):
        raise ValueError(f"stream purpose/index out of range: {purpose}, {index}")
    return (purpose << 32) | index


def raw(seed: int, stream: int, n: int) -> np.ndarray:
    """First ``n`` raw uint64 words of the ``(seed, stream)`` Philox stream."""
    if not 0 <= seed < _U64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    if not 0 <= stream < _U64:
        raise ValueError(f"stream must be a 64-bit unsigned integer, got {stream}")
    bitgen = np.random.Philox(key=np.array([seed, stream], dtype=np.uint64))
    if n == 0:
        return np.zeros(0, dtype=np.uint64)
    return np.asarray(bitgen.random_raw(n), dtype=np.uint64)


def uniform(seed: int, stream: int, n: int) -> np.ndarray:
    """Doubles in the open interval (0, 1): ``((w >> 11) + 0.5) * 2**-53``."""
    words = raw(seed, stream, n) >> np.uint64(11)
    return (words.astype(np.float64) + 0.5) * 2.0**-53


def normal(seed: int, stream: int, n: int) -> np.ndarray:
    return special.ndtri(uniform(seed, stream, n))


def truncated_normal(seed: int, stream: int, n: int, std: float, bound: float = 2.0) -> np.ndarray:
    """Normal(0, std) truncated to ``[-bound*std, bound*std]`` by inverse CDF.

    Inverse-CDF sampling consumes exactly one word per value, so the
    output for a given ``(seed, stream)`` does not depend on ``n`` beyond
    truncation of the sequence.
    """
    lo = special.ndtr(-bound)
    hi = special.ndtr(bound)
    u = uniform(seed, stream, n)
    z = special.ndtri(lo + u * (hi - lo))
    np.clip(z, -bound, bound, out=z)
    return z * std


def permutation(seed: int, stream: int, n: int) -> np.ndarray:
    """Permutation of ``range(n)`` obtained by sorting raw words (stable sort)."""
    return np.argsort(raw(seed, stream, n), kind="stable").astype(np.int64)
