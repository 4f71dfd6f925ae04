"""Seedable, counter-based random streams.

Each draw is addressed by ``(master_seed, stage, index)`` and gets its own
Philox generator, so results do not depend on how work is scheduled.
"""

import numpy as np

# stage tags keep streams for different purposes disjoint
STAGE_VARIANCE = 0
STAGE_MSTEP = 1
STAGE_STDEV = 2
STAGE_LANCZOS = 3


def stream(seed, *path) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(key=ss.generate_state(2, np.uint64)))


def stage_seed(seed, *path) -> int:
    """Derive a plain integer seed (e.g. for Lanczos start vectors)."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(p) for p in path))
    return int(ss.generate_state(1, np.uint64)[0])
