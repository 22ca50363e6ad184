"""Named random streams derived from a single 64-bit seed.

Each subsystem (weight init, shuffling, dropout, synthetic data) draws from
its own stream, keyed by name plus optional integers such as the epoch, so
changing how much one subsystem consumes never shifts another.
"""

from __future__ import annotations

import os
import zlib

import numpy as np

SEED_ENV = "MAMBA_VA_SEED"


def stream(seed: int, name: str, *keys: int) -> np.random.Generator:
    spawn_key = (zlib.crc32(name.encode()), *(int(k) for k in keys))
    return np.random.default_rng(np.random.SeedSequence(int(seed) & (2**64 - 1), spawn_key=spawn_key))


def seed_from_env(default: int = 0) -> int:
    raw = os.environ.get(SEED_ENV)
    return default if raw in (None, "") else int(raw)
