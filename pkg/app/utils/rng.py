# app/utils/rng.py
"""
Counter-based random streams.

Every draw in the package comes from a numpy Philox generator keyed by the run seed plus a
stream path (e.g. ("episode", 17)). A stream never depends on how many numbers other streams
consumed, so generation order and thread scheduling cannot change results.
"""
import zlib
from typing import Union

import numpy as np

StreamKey = Union[int, str]


def _key_to_int(key: StreamKey) -> int:
    if isinstance(key, bool):
        return int(key)
    if isinstance(key, int):
        if key < 0:
            raise ValueError(f"stream keys must be non-negative, got {key}")
        return key
    # crc32 is stable across processes, unlike hash()
    return zlib.crc32(str(key).encode("utf-8"))


def make_rng(seed: int, *stream: StreamKey) -> np.random.Generator:
    """Return an independent generator for (seed, *stream)."""
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    entropy = [int(seed)] + [_key_to_int(k) for k in stream]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def derive_seed(seed: int, *stream: StreamKey) -> int:
    """Derive a 63-bit integer seed for a sub-stream (used to label episodes)."""
    return int(make_rng(seed, *stream).integers(0, 2**63 - 1))
