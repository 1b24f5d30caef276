"""Seeded, counter-addressable random streams.

Every consumer (weight init, task generation, Monte-Carlo sampling, landscape
directions) asks for a stream by ``(seed, *labels)``.  Streams are Philox
generators keyed from a SeedSequence over the seed and the hashed labels, so a
stream's contents depend only on its address, never on call order.
"""

from __future__ import annotations

import zlib

import numpy as np


def _label_word(label) -> int:
    if isinstance(label, (int, np.integer)):
        return int(label) & 0xFFFFFFFF
    return zlib.crc32(str(label).encode("utf-8"))


def stream(seed: int, *labels) -> np.random.Generator:
    """Return the generator addressed by ``seed`` and ``labels``."""
    words = [int(seed) & 0xFFFFFFFF, int(seed) >> 32 & 0xFFFFFFFF] + [_label_word(x) for x in labels]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))
