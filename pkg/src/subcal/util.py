"""Small shared helpers (RNG construction, array coercion)."""

from __future__ import annotations

import numpy as np


def make_rng(seed, *spawn_key) -> np.random.Generator:
    """Build a Generator from an int seed, SeedSequence, or Generator.

    ``spawn_key`` selects an independent substream: the same ``seed`` with a
    different key yields a statistically independent, reproducible stream.
    Passing an existing Generator returns it unchanged (keys are ignored).
    """
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, np.random.SeedSequence):
        if spawn_key:
            seed = np.random.SeedSequence(
                entropy=seed.entropy, spawn_key=tuple(seed.spawn_key) + tuple(spawn_key)
            )
        return np.random.default_rng(seed)
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(spawn_key))
    return np.random.default_rng(ss)


def as_matrix(x, d: int) -> np.ndarray:
    """Coerce a single point or a batch to a (N, d) float array."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        if d != 1:
            raise ValueError(f"scalar input given but {d} coordinates expected")
        return arr.reshape(1, 1)
    if arr.ndim == 1:
        if arr.shape[0] == d:
            return arr.reshape(1, d)
        if d == 1:
            return arr.reshape(-1, 1)
        raise ValueError(f"1-d input of length {arr.shape[0]} incompatible with d={d}")
    if arr.ndim == 2 and arr.shape[1] == d:
        return arr
    raise ValueError(f"input of shape {arr.shape} incompatible with d={d}")


def as_vector(theta, q: int) -> np.ndarray:
    arr = np.asarray(theta, dtype=float).reshape(-1)
    if arr.shape[0] != q:
        raise ValueError(f"parameter of length {arr.shape[0]} incompatible with q={q}")
    return arr
