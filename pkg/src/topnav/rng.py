"""Named RNG sub-streams derived from one master seed."""

from __future__ import annotations

import zlib

import numpy as np


def stream_key(*names) -> tuple[int, ...]:
    return tuple(zlib.crc32(str(n).encode("utf-8")) for n in names)


def derive_rng(master_seed: int, *names) -> np.random.Generator:
    """Independent generator for ``(master_seed, *names)``; stable across runs and platforms."""
    ss = np.random.SeedSequence(entropy=int(master_seed), spawn_key=stream_key(*names))
    return np.random.default_rng(ss)


def as_rng(seed_or_rng) -> np.random.Generator:
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)
