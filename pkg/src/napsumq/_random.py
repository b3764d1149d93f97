"""Seed plumbing.

Every stage takes a seed-like value (int, ``SeedSequence``, ``Generator`` or
None). Independent streams for repeat ``i`` / stage ``k`` come from
``derive_seed(master, i, k)``, which uses the SeedSequence spawn key so that
adding repeats never perturbs the streams of earlier ones.
"""

from __future__ import annotations

import numpy as np


def as_seed_sequence(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    if isinstance(seed, np.random.Generator):
        return np.random.SeedSequence(int(seed.integers(2**63)))
    return np.random.SeedSequence(seed)


def as_generator(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(as_seed_sequence(seed))


def derive_seed(seed, *keys: int) -> np.random.SeedSequence:
    base = as_seed_sequence(seed)
    return np.random.SeedSequence(
        entropy=base.entropy,
        spawn_key=tuple(base.spawn_key) + tuple(int(k) for k in keys),
    )


def seed_to_int(seed) -> int | None:
    """Compact integer record of a seed for JSON metadata."""
    if seed is None:
        return None
    if isinstance(seed, (int, np.integer)):
        return int(seed)
    return int(as_seed_sequence(seed).generate_state(1, dtype=np.uint64)[0])
