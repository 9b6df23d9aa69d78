"""Seeded, splittable random streams.

Every consumer of randomness asks for a generator keyed by ``(seed, stream)``
so that independent parts of an experiment never share draws.
"""

from __future__ import annotations

import numpy as np

# stream ids; order is part of the reproducibility contract
INIT = 1
FM_BATCH = 2
ENV_RESET = 3
SAMPLER = 4
PPO_SHUFFLE = 5
BC_BATCH = 6
DEMOS = 7
EVAL = 8
ORACLE = 9


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Return a PCG64 generator for ``seed`` split along ``stream`` ids."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF, *(int(s) for s in stream)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
