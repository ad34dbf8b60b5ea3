"""Seeded random streams.

All randomness goes through numpy's Philox-4x64 counter-based bit generator,
keyed directly by ``(seed, stream)`` so draws do not depend on platform or on
numpy's seed-hashing scheme.
"""

from __future__ import annotations

import zlib

import numpy as np

MASK64 = (1 << 64) - 1


def stream_id(label: str) -> int:
    return zlib.crc32(label.encode("utf-8"))


def make_rng(seed: int, stream: int | str = 0) -> np.random.Generator:
    if isinstance(stream, str):
        stream = stream_id(stream)
    key = np.array([seed & MASK64, stream & MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
