"""Seeded, splittable random streams.

Every random draw in the package comes from ``stream(seed, *keys)``: a
Philox (counter-based, 64-bit) generator whose key is derived from the run
seed plus a tuple of labels.  Two streams with different labels are
statistically independent, and the same labels always give the same stream.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError(f"stream keys must be non-negative, got {key}")
        return int(key)
    digest = hashlib.sha256(str(key).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def stream(seed: int, *keys) -> np.random.Generator:
    """Return the generator for ``(seed, *keys)``."""
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key_to_int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))
