"""Seeded random streams.

All randomness goes through ``numpy.random.Generator`` backed by Philox4x64-10,
a counter-based generator whose output depends only on (key, counter), so a
64-bit seed reproduces byte-identical streams on every platform.
"""
from __future__ import annotations

import numpy as np

SEED_MASK = (1 << 64) - 1


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Generator for ``seed``; extra integers select independent sub-streams."""
    ss = np.random.SeedSequence([seed & SEED_MASK, *[s & SEED_MASK for s in stream]])
    return np.random.Generator(np.random.Philox(ss))


def get_state(rng: np.random.Generator) -> dict:
    state = rng.bit_generator.state
    return _to_jsonable(state)


def set_state(rng: np.random.Generator, state: dict) -> None:
    st = dict(state)
    st["state"] = {
        "counter": np.array(state["state"]["counter"], dtype=np.uint64),
        "key": np.array(state["state"]["key"], dtype=np.uint64),
    }
    st["buffer"] = np.array(state["buffer"], dtype=np.uint64)
    rng.bit_generator.state = st


def rng_from_state(state: dict) -> np.random.Generator:
    rng = np.random.Generator(np.random.Philox(0))
    set_state(rng, state)
    return rng


def _to_jsonable(obj):
    if isinstance(obj, dict):
        return {k: _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return [int(x) for x in obj.tolist()]
    if isinstance(obj, np.integer):
        return int(obj)
    return obj
