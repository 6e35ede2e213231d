"""Seeded random streams.

All randomness in the library flows from a single 64-bit root seed through
named substreams, so paired experiments (e.g. recovery on/off) can share
every other random decision while isolating the one under study.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & _MASK64
    digest = hashlib.blake2b(str(key).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def substream(seed: int, *keys) -> np.random.Generator:
    """Deterministic generator for (seed, *keys).

    Distinct key paths give statistically independent streams; the same path
    always reproduces the same stream, independent of call order.
    """
    entropy = [int(seed) & _MASK64] + [_key_to_int(k) for k in keys]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def derive_seed(seed: int, *keys) -> int:
    """64-bit child seed for handing to components that want a plain int."""
    return int(substream(seed, *keys).integers(0, _MASK64, dtype=np.uint64))
