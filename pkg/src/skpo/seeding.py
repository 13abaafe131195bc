"""Splittable seeding.

Every random stream is addressed by a path below the root seed, e.g.
``child_seed(root, "train", 3, "segment", 0)``. Path elements are ints or
strings (strings are mapped through CRC-32), and the path becomes the
``spawn_key`` of a :class:`numpy.random.SeedSequence`. Adding a new stream
never perturbs existing ones because no stream consumes another's entropy.
"""

from __future__ import annotations

import zlib

import numpy as np


def _part(x) -> int:
    if isinstance(x, (int, np.integer)):
        if x < 0:
            raise ValueError("seed path integers must be nonnegative")
        return int(x)
    return zlib.crc32(str(x).encode("utf-8"))


def child_seed(seed, *path) -> np.random.SeedSequence:
    """Derive the stream at ``path`` below ``seed`` (int or SeedSequence)."""
    if isinstance(seed, np.random.SeedSequence):
        return np.random.SeedSequence(seed.entropy, spawn_key=tuple(seed.spawn_key) + tuple(_part(p) for p in path))
    if seed is None:
        raise ValueError("a seed is required for reproducible streams")
    return np.random.SeedSequence(int(seed), spawn_key=tuple(_part(p) for p in path))


def rng_for(seed, *path) -> np.random.Generator:
    return np.random.default_rng(child_seed(seed, *path))
