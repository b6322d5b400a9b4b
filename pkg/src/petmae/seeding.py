"""Seed derivation shared by every stochastic component.

All randomness comes from numpy's PCG64 generator.  Independent streams are
keyed by integer tuples (base seed, purpose tag, index...) through
``SeedSequence``, so a stream never depends on how many draws another made.
"""
from __future__ import annotations

import os

import numpy as np

DEFAULT_SEED = 20240101
SEED_ENV = "PETMAE_SEED"

# Purpose tags for derived streams.
ORDER = 1
CROP = 2
MASK = 3
HEAD = 4
SUBSET = 5
CASE = 6
SPLIT = 7


def default_seed() -> int:
    value = os.environ.get(SEED_ENV)
    return int(value) if value not in (None, "") else DEFAULT_SEED


def rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng([int(k) for k in keys])


def derive_seed(*keys: int) -> int:
    """A 63-bit integer seed determined by ``keys``."""
    lo, hi = np.random.SeedSequence([int(k) for k in keys]).generate_state(2, dtype=np.uint32)
    return int((int(hi) << 32 | int(lo)) & (2**63 - 1))
