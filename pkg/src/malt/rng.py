"""Seeded random streams.

All randomness goes through numpy's PCG64 bit generator seeded with an
unsigned 64-bit integer, so a seed fully determines a run.  Generator state
round-trips through JSON for checkpoints.
"""
from __future__ import annotations

import json

import numpy as np


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed)))


def derive_seed(seed: int, *tags: int) -> int:
    """A child seed for a sub-stream (e.g. one per synthetic stream)."""
    ss = np.random.SeedSequence([int(seed), *map(int, tags)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def rng_state_json(rng: np.random.Generator) -> str:
    return json.dumps(rng.bit_generator.state, sort_keys=True)


def rng_from_state_json(text: str) -> np.random.Generator:
    bg = np.random.PCG64()
    bg.state = json.loads(text)
    return np.random.Generator(bg)
