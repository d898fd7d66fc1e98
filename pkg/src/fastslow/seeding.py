"""Deterministic random-stream derivation.

All randomness in the toolkit flows from a single experiment seed through
``substream``; a stream is identified by the seed plus a tuple of integer
path components (role, chunk, member, ...), so reruns and concurrent
execution orders cannot change any result.
"""

from __future__ import annotations

import numpy as np

# Role constants for substream paths (stable across versions).
ROLE_DRIVER = 1
ROLE_ENSEMBLE = 2
ROLE_SDE = 3
ROLE_MODES = 4
ROLE_CALIBRATION = 5
ROLE_INITIAL = 6


def substream(seed: int, *path: int) -> np.random.Generator:
    """Generator for the stream identified by (seed, *path)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, path)]))
