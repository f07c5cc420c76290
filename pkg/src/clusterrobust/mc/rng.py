"""Counter-based random streams keyed by (master seed, replication key).

Each replication draws from its own Philox stream, so results do not depend
on how replications are scheduled across workers.
"""

from __future__ import annotations

import numpy as np

__all__ = ["stream"]


def stream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for ``key`` (e.g. ``(grid_point, replication)``)."""
    if not 0 <= int(seed) < 2**64:
        raise ValueError("seed must be a 64-bit unsigned integer")
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))
