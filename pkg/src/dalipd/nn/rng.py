"""Deterministic counter-based random streams shared by all modules.

Philox is a 64-bit counter-based generator: a (seed, stream) pair fully
determines the stream, so runs are reproducible bit-for-bit and worker
processes can derive disjoint streams without coordination.
"""
from __future__ import annotations

import numpy as np


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """RNG for a (seed, stream...) address, e.g. make_rng(7, sample_idx)."""
    ss = np.random.SeedSequence(
        entropy=int(seed), spawn_key=tuple(int(s) for s in stream)
    )
    return np.random.Generator(np.random.Philox(ss))
