# seeding.py
"""
Named random sub-streams.

Every random draw in the project comes from one integer seed split into named
streams ('data', 'init', 'shuffle', ...), so adding draws to one stream never
shifts another.
"""
import zlib

import numpy as np

DATA_STREAM = "data"
INIT_STREAM = "init"
SHUFFLE_STREAM = "shuffle"


def stream_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def stream_rng(seed: int, name: str, *keys: int) -> np.random.Generator:
    """Generator for (seed, stream name, extra integer keys)."""
    entropy = [int(seed) & 0xFFFFFFFF, stream_key(name)] + [int(k) & 0xFFFFFFFF for k in keys]
    return np.random.default_rng(entropy)
