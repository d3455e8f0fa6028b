"""Counter-based random streams.

Every draw is keyed by ``(seed, operation name, index)`` so results do not
depend on the order in which work items are processed or on how a grid is
split between worker processes.
"""

import zlib

import numpy as np


def keyed_generator(seed: int, op: str, index: int = 0) -> np.random.Generator:
    seed = int(seed)
    if seed < 0:
        raise ValueError("seed must be non-negative")
    words = [seed & 0xFFFFFFFF, (seed >> 32) & 0xFFFFFFFF, zlib.crc32(op.encode()), int(index)]
    key = np.random.SeedSequence(words)
    return np.random.Generator(np.random.Philox(key))
