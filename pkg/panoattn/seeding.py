"""Named, seeded random generators.

Every random stream is keyed by (seed, name) so that adding a new consumer
never shifts the numbers another consumer sees.
"""

import zlib

import numpy as np


def make_rng(seed: int, name: str) -> np.random.Generator:
    """Return a PCG64 generator for the stream `name` under `seed`."""
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed) & 0xFFFF_FFFF_FFFF_FFFF, spawn_key=(key,)))
