"""Counter-based seed derivation.

Every random stream is ``SeedSequence(master, spawn_key=keys)`` where the
keys are small integers or strings (strings are mapped to a stable 32-bit
CRC).  A stream therefore depends only on the master seed and its own
label, never on how many other streams were drawn before it.
"""

import zlib

import numpy as np

MASK64 = (1 << 64) - 1


def _key(k):
    if isinstance(k, str):
        return zlib.crc32(k.encode())
    k = int(k)
    if k < 0:
        raise ValueError("seed keys must be non-negative")
    return k


def seed_sequence(master, *keys) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(master) & MASK64, spawn_key=tuple(_key(k) for k in keys))


def derive_rng(master, *keys) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed_sequence(master, *keys)))


def derive_seed(master, *keys) -> int:
    """A 64-bit integer seed for the stream labelled by ``keys``."""
    return int(seed_sequence(master, *keys).generate_state(1, np.uint64)[0])
