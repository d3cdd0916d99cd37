"""Deterministic seed derivation.

Child seeds are derived from a master seed and a key path through
``numpy.random.SeedSequence`` so that results never depend on call order.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key_int(key: int | str) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    return int(key)


def derive_seed(master_seed: int, *keys: int | str) -> int:
    """63-bit seed for the child addressed by ``keys`` under ``master_seed``."""
    seq = np.random.SeedSequence(int(master_seed), spawn_key=tuple(_key_int(k) for k in keys))
    lo, hi = seq.generate_state(2, dtype=np.uint32)
    return int((int(hi) << 32 | int(lo)) & ((1 << 63) - 1))
