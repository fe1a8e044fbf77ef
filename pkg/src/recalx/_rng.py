"""Seed derivation.

Every random stream in the toolkit is a numpy ``Generator`` backed by PCG64.
Child seeds are derived from a parent seed plus a component name (and any
integer keys) through SHA-256, so each component owns an independent stream
and partial re-runs see the same numbers.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def derive_seed(seed: int, *keys: object) -> int:
    """Return a 64-bit seed derived from ``seed`` and ``keys``.

    The derivation is ``int(sha256("seed/key1/key2/...")[:8], "big")``.
    """
    text = "/".join([str(int(seed) & _MASK64)] + [str(k) for k in keys])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def generator(seed: int, *keys: object) -> np.random.Generator:
    """PCG64 generator for the stream identified by ``(seed, *keys)``."""
    if keys:
        seed = derive_seed(seed, *keys)
    return np.random.Generator(np.random.PCG64(int(seed) & _MASK64))
