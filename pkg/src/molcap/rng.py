"""Seeded random streams.

Every experiment takes one integer seed.  Independent sub-streams (per chunk
of trials, per arm, per purpose) are derived from the root's spawn tree, so
results do not depend on how chunks are scheduled across workers.
"""

from __future__ import annotations

import numpy as np


def as_seed_sequence(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    if isinstance(seed, np.random.Generator):
        # draw an entropy word so that a passed generator still fixes the run
        return np.random.SeedSequence(int(seed.integers(0, 2**63)))
    if seed is None:
        raise ValueError("a seed is required for reproducible runs")
    return np.random.SeedSequence(int(seed))


def child_sequences(seed, n: int) -> list[np.random.SeedSequence]:
    """``n`` independent children of the root seed.

    Children are rebuilt from the root's entropy, so repeated calls with the
    same ``SeedSequence`` return the same streams.
    """
    root = as_seed_sequence(seed)
    return [
        np.random.SeedSequence(root.entropy, spawn_key=root.spawn_key + (i,), pool_size=root.pool_size)
        for i in range(n)
    ]


def generator(seed) -> np.random.Generator:
    return np.random.default_rng(as_seed_sequence(seed))


def chunk_bounds(total: int, chunk_size: int) -> list[tuple[int, int]]:
    return [(a, min(a + chunk_size, total)) for a in range(0, total, chunk_size)]
