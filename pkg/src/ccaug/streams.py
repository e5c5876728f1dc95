"""Counter-based random streams.

Every random draw in a run comes from a Philox generator keyed by the master
seed and a purpose tag, with the counter set from (epoch, sample index,
...).  A sample's draws therefore depend only on where it sits in the data,
never on batch partitioning or evaluation order.
"""

from __future__ import annotations

import zlib

import numpy as np

_MASK = (1 << 64) - 1


def _tag(purpose: str) -> int:
    return zlib.crc32(purpose.encode())


def stream(seed: int, purpose: str, *counters: int) -> np.random.Generator:
    if len(counters) > 3:
        raise ValueError("at most three counter words")
    words = [0, *(int(c) & _MASK for c in counters)]
    words += [0] * (4 - len(words))
    bitgen = np.random.Philox(key=np.array([int(seed) & _MASK, _tag(purpose)], dtype=np.uint64),
                              counter=np.array(words, dtype=np.uint64))
    return np.random.Generator(bitgen)


def sample_streams(seed: int, purpose: str, epoch: int, indices) -> list[np.random.Generator]:
    return [stream(seed, purpose, epoch, int(i)) for i in indices]
