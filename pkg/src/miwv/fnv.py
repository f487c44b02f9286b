"""64-bit FNV-1a hashing.

Both deterministic test backends (the hashing embedder and the hash-mock
scorer) are defined in terms of this function, so it lives in one place and
is exercised directly by the test suite.
"""

from __future__ import annotations

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def fnv1a64(data: bytes, seed: int = FNV64_OFFSET) -> int:
    """Hash ``data`` with 64-bit FNV-1a, starting from ``seed``."""
    h = seed
    for b in data:
        h = ((h ^ b) * FNV64_PRIME) & _MASK64
    return h


def fnv1a64_step(state: int, byte: int) -> int:
    """Advance an FNV-1a state by one byte.

    ``fnv1a64(s + bytes([b]))`` equals ``fnv1a64_step(fnv1a64(s), b)``, which
    lets callers hash a growing prefix in O(1) per byte.
    """
    return ((state ^ byte) * FNV64_PRIME) & _MASK64
