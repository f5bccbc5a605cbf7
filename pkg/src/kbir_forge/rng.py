"""Seed derivation so every document gets its own reproducible stream."""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def fnv1a64(data: str | bytes) -> int:
    if isinstance(data, str):
        data = data.encode("utf-8")
    h = 0xCBF29CE484222325
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) & _MASK64
    return h


def document_seed(seed: int, doc_id: str, epoch: int = 0) -> int:
    """splitmix64(seed ^ fnv1a64(doc_id)); later epochs first remix the seed."""
    base = seed & _MASK64
    if epoch:
        base = splitmix64(base ^ splitmix64(epoch & _MASK64))
    return splitmix64(base ^ fnv1a64(doc_id))


def generator(state: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(state & _MASK64))


def document_rng(seed: int, doc_id: str, epoch: int = 0) -> np.random.Generator:
    return generator(document_seed(seed, doc_id, epoch))
