"""Named random streams derived from one root seed.

``stream(seed, name)`` seeds a PCG64 generator from ``SeedSequence(seed,
spawn_key=(crc32(name),))``. Streams are independent of each other, so adding
a new consumer never shifts the draws of an existing one.
"""

import zlib

import numpy as np


def stream(seed: int, name: str) -> np.random.Generator:
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=(key,))))
