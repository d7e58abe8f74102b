"""Derived, purpose-keyed RNG streams.

Every random draw in the package comes from a generator keyed by
(seed, purpose, indices...), never from a shared mutable stream. This
makes generation, batching, and initialization pure functions of their
keys, so interrupted runs can resume without serializing RNG state.
"""

from __future__ import annotations

import zlib

import numpy as np


def rng_for(*keys) -> np.random.Generator:
    ints = []
    for k in keys:
        if isinstance(k, (int, np.integer)):
            ints.append(int(k) & 0xFFFFFFFF)
        else:
            ints.append(zlib.crc32(str(k).encode("utf-8")))
    return np.random.default_rng(np.random.SeedSequence(ints))
