from __future__ import annotations

import numpy as np

# floor applied inside every log so losses and divergences stay finite
PROB_FLOOR = 1e-12


def softmax(z: np.ndarray, temperature: float | np.ndarray | None = None) -> np.ndarray:
    """Row-wise softmax of ``z / temperature`` over the last axis.

    The maximum is subtracted before scaling, which is exact for ``T > 0``
    and leaves ``temperature=None`` (or 1) bit-identical to plain softmax.
    """
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    if temperature is not None:
        shifted /= temperature
    e = np.exp(shifted, out=shifted)
    return e / e.sum(axis=-1, keepdims=True)


def popcount(masks: np.ndarray) -> np.ndarray:
    return np.bitwise_count(np.asarray(masks, dtype=np.uint64)).astype(np.int64)


def mask_bits(masks: np.ndarray, d: int) -> np.ndarray:
    """Boolean ``(n, d)`` matrix; entry ``[r, j]`` is bit ``j`` of ``masks[r]``."""
    masks = np.asarray(masks, dtype=np.uint64).reshape(-1)
    shifts = np.arange(d, dtype=np.uint64)
    return ((masks[:, None] >> shifts) & np.uint64(1)).astype(bool)


def bits_to_masks(bits: np.ndarray) -> np.ndarray:
    bits = np.asarray(bits, dtype=bool)
    weights = np.left_shift(np.uint64(1), np.arange(bits.shape[1], dtype=np.uint64))
    return (bits.astype(np.uint64) * weights).sum(axis=1, dtype=np.uint64)
