"""Counter-based random streams.

Every draw in the package comes from a generator keyed by
``(seed_root, tag, *indices)``. Streams never depend on execution order, so
running a stage on one worker or many gives identical numbers.
"""

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    part = int(part)
    if part < 0:
        raise ValueError("stream indices must be non-negative")
    return part


def stream(seed_root: int, *keys) -> np.random.Generator:
    """Independent generator for the named stream ``keys`` under ``seed_root``."""
    seq = np.random.SeedSequence(int(seed_root), spawn_key=tuple(_key(k) for k in keys))
    return np.random.Generator(np.random.PCG64(seq))
