"""Named, independent random streams derived from one run seed.

Each name hashes into the spawn key of a SeedSequence, so drawing more or
fewer numbers from one stream never shifts another.
"""

from __future__ import annotations

import zlib

import numpy as np


def named_stream(seed: int, name: str) -> np.random.Generator:
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(key,))))


def get_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def set_state(rng: np.random.Generator, state: dict) -> np.random.Generator:
    rng.bit_generator.state = state
    return rng


def restore_stream(seed: int, name: str, state: dict | None) -> np.random.Generator:
    rng = named_stream(seed, name)
    return set_state(rng, state) if state is not None else rng
