"""Named random sub-streams.

All CLI randomness flows from one ``--seed``; each module draws from its own
named stream so adding a draw in one stage never perturbs another.
"""

from __future__ import annotations

import zlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    """Return a generator for the (seed, name) sub-stream."""
    return np.random.default_rng([seed & 0xFFFFFFFF, zlib.crc32(name.encode("utf-8"))])


def as_generator(seed_or_rng) -> np.random.Generator:
    """Accept an int seed or an existing Generator."""
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)
