"""Reproducible random streams keyed by integer tuples.

Every stream is a Philox (counter-based) generator seeded from
``SeedSequence(seed, spawn_key=keys)``, so a draw is fully determined by the
base seed and its keys, e.g. ``(epoch, graph_index, sample_index)``.
"""

from __future__ import annotations

import numpy as np


def stream(seed: int, *keys: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return stream(0 if rng is None else int(rng))
