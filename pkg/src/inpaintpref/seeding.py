"""Platform-independent seed derivation (SplitMix64)."""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15


def splitmix64(x: int) -> int:
    z = (x + GOLDEN_GAMMA) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def stable_hash(*words: int) -> int:
    """Hash a sequence of unsigned 64-bit integers.

    The inputs are viewed as their concatenated little-endian byte encoding,
    consumed 8 bytes at a time: ``h = splitmix64(h ^ word)`` starting from
    ``h = 0``. Negative inputs are rejected.
    """
    h = 0
    for w in words:
        w = int(w)
        if w < 0 or w > MASK64:
            raise ValueError(f"hash input {w} is not an unsigned 64-bit integer")
        h = splitmix64(h ^ w)
    return h


def rng(*words: int) -> np.random.Generator:
    return np.random.default_rng(stable_hash(*words))


def unit_float(*words: int) -> float:
    """Uniform value in [0, 1) from the top 53 bits of the hash."""
    return (stable_hash(*words) >> 11) * (1.0 / (1 << 53))
