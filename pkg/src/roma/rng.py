"""Named random sub-streams derived from a single top-level seed."""

from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, name: str, *keys: int) -> np.random.Generator:
    """Generator for the sub-stream ``name`` of ``seed``, further keyed by integers.

    Changing one stream's consumer never shifts the draws of another.
    """
    return np.random.default_rng([int(seed), zlib.crc32(name.encode()), *map(int, keys)])
