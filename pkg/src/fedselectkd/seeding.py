"""Named RNG sub-streams fanned out from one master seed."""
from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, *names) -> np.random.SeedSequence:
    """Independent, reproducible stream for ``(seed, *names)``.

    Names are hashed with CRC32, so adding a new consumer never shifts the
    draws of an existing one.
    """
    key = [zlib.crc32(str(n).encode()) for n in names]
    return np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *key])


def rng(seed: int, *names) -> np.random.Generator:
    return np.random.default_rng(stream(seed, *names))
