"""Deterministic fan-out of one user-facing seed into per-purpose streams."""

from __future__ import annotations

import zlib

import numpy as np


def derive_seed(base_seed: int, tag: str) -> int:
    """Mix a base seed with a purpose tag into a new 63-bit seed.

    Every random consumer in the pipeline gets its own tag, so adding or
    reordering one consumer never perturbs the streams of the others.
    """
    digest = zlib.crc32(tag.encode("utf-8"))
    return (int(base_seed) * 0x9E3779B1 + digest) % (2**63)


def make_rng(base_seed: int, tag: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(base_seed, tag))
