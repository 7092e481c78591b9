"""Deterministic named RNG streams.

Every stochastic component draws from a child stream of the run seed,
keyed by a stable name, so two runs with equal seeds are equal everywhere
regardless of how many draws each component makes.
"""

from __future__ import annotations

import zlib

import numpy as np


def child_rng(seed, name):
    """Generator for the named child stream of a master seed."""
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(seed), key]))


def child_seed(seed, name):
    """Stable integer sub-seed for the named stream (for nesting)."""
    key = zlib.crc32(name.encode("utf-8"))
    return int(np.random.SeedSequence([int(seed), key]).generate_state(1)[0])
