"""Seeded random streams keyed by (seed, purpose tag, index).

Every stochastic draw in the package goes through :func:`generator`, which
builds a Philox counter-based generator from the seed, a stable hash of a
purpose tag, and any integer indices. Two draws with the same triple are
identical on every platform; draws with different tags are independent.
"""

import zlib

import numpy as np

__all__ = ["generator", "tag_key"]


def tag_key(tag: str) -> int:
    # crc32 is stable across processes, unlike hash().
    return zlib.crc32(tag.encode("utf-8"))


def generator(seed: int, tag: str, *index: int) -> np.random.Generator:
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF, tag_key(tag), *(int(i) for i in index)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
