"""Named random streams split from one master seed.

A stream is identified by a purpose string plus integer indices, so the
draws for (experiment i, replication r) do not depend on how many other
streams were consumed before it, or in which process.
"""

import zlib

import numpy as np


def purpose_key(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf-8"))


def stream(seed: int, purpose: str, *indices: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(purpose_key(purpose), *map(int, indices)))
    return np.random.Generator(np.random.PCG64(ss))
