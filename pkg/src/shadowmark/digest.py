"""64-bit FNV-1a digests over raw byte blobs."""

from __future__ import annotations

from typing import Iterable

import numpy as np

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK = 0xFFFFFFFFFFFFFFFF


def fnv1a64(chunks: Iterable[bytes], h: int = FNV_OFFSET) -> int:
    for chunk in chunks:
        for byte in chunk:
            h = ((h ^ byte) * FNV_PRIME) & _MASK
    return h


def hexdigest(chunks: Iterable[bytes]) -> str:
    return f"{fnv1a64(chunks):016x}"


def array_bytes(a: np.ndarray) -> bytes:
    """Little-endian float32, row-major bytes of an array."""
    return np.ascontiguousarray(a, dtype="<f4").tobytes()
