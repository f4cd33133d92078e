"""Seed derivation. Every random stream is keyed by content, never by schedule."""

import hashlib

import numpy as np

from ._validation import SEED_MASK


def stable_hash(text: str) -> int:
    """64-bit hash of ``text`` that is identical across processes and platforms."""
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def stream_seed(seed: int, *parts) -> int:
    """XOR ``seed`` with the hash of each string part and each integer part."""
    out = int(seed) & SEED_MASK
    for part in parts:
        if isinstance(part, str):
            out ^= stable_hash(part)
        else:
            out ^= int(part) & SEED_MASK
    return out


def generator(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed) & SEED_MASK))
