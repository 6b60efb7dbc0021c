"""Hierarchical random streams.

Every stream is a numpy ``Generator`` backed by the counter-based Philox4x64-10
bit generator. Streams are addressed by a root seed and a path of integers
(for example ``(trial, allocation, subset)``); the path is fed to
``numpy.random.SeedSequence`` as its ``spawn_key``, so the same address always
yields the same stream and distinct addresses yield independent streams.
"""

from __future__ import annotations

import numpy as np

ALGORITHM = "philox4x64-10/seedsequence"


def stream(seed: int, *path: int) -> np.random.Generator:
    """Return the generator addressed by ``seed`` and ``path``."""
    key = tuple(int(p) for p in path)
    if any(p < 0 for p in key):
        raise ValueError("stream path entries must be non-negative")
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))


def child(rng: np.random.Generator, *path: int) -> np.random.Generator:
    """Derive a sub-stream of ``rng`` without advancing it.

    The child key extends the parent's ``SeedSequence`` spawn key, which keeps
    the addressing hierarchical (trial -> allocation -> subset).
    """
    ss = rng.bit_generator.seed_seq
    key = tuple(ss.spawn_key) + tuple(int(p) for p in path)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(ss.entropy, spawn_key=key)))
