"""Seeded random streams. Every random draw in the library goes through here."""
from __future__ import annotations

import numpy as np


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """PCG64 generator keyed by ``seed`` and an optional stream path.

    ``make_rng(s, i)`` gives the i-th independent child stream of seed ``s``,
    which is how per-sample and per-run seeds are derived.
    """
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF, *(int(s) for s in stream)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, bound: float = 2.0) -> np.ndarray:
    # resample entries outside +-bound*std
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out * std
