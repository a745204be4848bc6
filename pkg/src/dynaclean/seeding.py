"""Stage seeds derived from one global seed.

Every random stream uses numpy's PCG64 generator seeded through a
``SeedSequence`` built from the global seed, a CRC-32 of the stage tag and
optional integers (e.g. a frame index). Python's ``hash`` is salted per
process, so it is never used here.
"""
from __future__ import annotations

import zlib

import numpy as np


def derive_seed(seed: int, tag: str, *extra: int) -> int:
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(tag.encode()), *map(int, extra)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def stage_rng(seed: int, tag: str, *extra: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, tag, *extra))
