"""Named, independent random streams derived from a single integer seed."""
from __future__ import annotations

import numpy as np

# Fixed ids so that adding a stream never perturbs the others.
STREAMS = {
    "init": 0,
    "dropout": 1,
    "batching": 2,
    "tiebreak": 3,
    "smoothing": 4,
    "subsample": 5,
    "sweep": 6,
    "split": 7,
    "synthetic": 8,
}


def stream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(STREAMS[name],)))
