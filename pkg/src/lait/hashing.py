"""64-bit FNV-1a, used for token ids, cache keys and weight fingerprints."""

from __future__ import annotations

import struct
from typing import Iterable

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes, seed: int = FNV64_OFFSET) -> int:
    h = seed
    for byte in data:
        h ^= byte
        h = (h * FNV64_PRIME) & _MASK64
    return h


def token_digest(token_ids: Iterable[int]) -> int:
    """FNV-1a over the ids, each packed as a little-endian u32."""
    ids = [int(t) for t in token_ids]
    return fnv1a64(struct.pack(f"<{len(ids)}I", *ids))
