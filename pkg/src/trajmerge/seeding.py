"""Seed derivation.

Every random stream in the package is keyed by an explicit integer seed plus
a tuple of integer/string keys, so that work split across prompts, rounds or
purposes never shares generator state.
"""

from __future__ import annotations

import zlib

import numpy as np

_U64 = (1 << 64) - 1


def _key_to_int(key: int | str) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    return int(key) & _U64


def derive_seed(seed: int, *keys: int | str) -> int:
    """Hash ``seed`` and ``keys`` into a fresh unsigned 64-bit seed."""
    entropy = [_key_to_int(seed), *(_key_to_int(k) for k in keys)]
    state = np.random.SeedSequence(entropy).generate_state(2, dtype=np.uint32)
    return int(state[0]) | (int(state[1]) << 32)


def rng_for(seed: int, *keys: int | str) -> np.random.Generator:
    return np.random.default_rng([_key_to_int(seed), *(_key_to_int(k) for k in keys)])
