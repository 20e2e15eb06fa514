"""Deterministic, collision-resistant seed derivation for RNG streams."""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["derive_seed", "rng_for"]


def derive_seed(base: int, index: int, purpose: str) -> int:
    """Mix (base seed, index, purpose tag) into a 63-bit stream seed.

    Streams for different purposes (env noise, exploration, replay
    sampling, ...) never collide, and the result is independent of call
    order or platform.
    """
    payload = f"execlab|{base}|{index}|{purpose}".encode()
    digest = hashlib.blake2b(payload, digest_size=8).digest()
    return int.from_bytes(digest, "little") & ((1 << 63) - 1)


def rng_for(base: int, index: int, purpose: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(base, index, purpose))
