"""Seed-splitting: all randomness in a run flows from one base seed.

A stream is addressed by the base seed plus a tuple of names (strings or
ints), e.g. ``named_rng(seed, "init")`` or ``named_rng(seed, stage, "batch",
step)``. Streams with different names are statistically independent and the
mapping is stable across processes, so any batch, mask, or initialization
draw is a pure function of (seed, names) and never of call order.
"""

from __future__ import annotations

import zlib

import numpy as np


def _entropy(base: int, names: tuple) -> list[int]:
    ents = [int(base) & 0xFFFFFFFF]
    for name in names:
        if isinstance(name, (int, np.integer)):
            ents.append(int(name) & 0xFFFFFFFF)
        else:
            ents.append(zlib.crc32(str(name).encode("utf-8")))
    return ents


def named_rng(base: int, *names) -> np.random.Generator:
    """Deterministic generator for the stream addressed by (base, *names)."""
    return np.random.default_rng(np.random.SeedSequence(_entropy(base, names)))
