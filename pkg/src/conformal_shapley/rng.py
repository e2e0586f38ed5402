"""Seeded random streams.

All randomness flows through Philox (counter-based) generators. A stream is
identified by an integer seed plus a name, so independent stages never share
draws and adding a new stage cannot perturb existing ones.
"""
import zlib

import numpy as np


def make_rng(seed, stream=""):
    """Return a Philox-backed Generator for ``(seed, stream)``."""
    if isinstance(seed, np.random.Generator):
        return seed
    key = zlib.crc32(stream.encode("utf-8"))
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, key])
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed, stream):
    """Deterministic 63-bit integer seed for a named sub-stream."""
    return int(make_rng(seed, stream).integers(0, 2 ** 63 - 1))
