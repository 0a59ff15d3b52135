"""Seed handling.

All randomness in this package flows through Philox, a 64-bit counter-based
generator, so a seed reproduces bit-for-bit across platforms and thread
counts.  Stream tags keep independent draws (views, masks, noise, ...)
decoupled: skipping one consumer never shifts another's stream.
"""

from __future__ import annotations

import numpy as np


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Generator for the given seed and optional stream tags."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, *stream))))
