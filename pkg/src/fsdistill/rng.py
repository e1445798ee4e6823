"""Named, independently reproducible random substreams.

A master seed fans out into fixed-index substreams (init, shuffle, memory,
pool, ...) so that, e.g., reshuffling data never perturbs parameter
initialisation. Streams are derived through SeedSequence spawn keys, which
gives a stable counter-based derivation across platforms.
"""
from __future__ import annotations

import numpy as np

STREAMS = {
    "init": 0,
    "shuffle": 1,
    "memory": 2,
    "pool": 3,
    "dropout": 4,
    "data": 5,
}


def substream(master_seed: int, name: str, index: int = 0) -> np.random.Generator:
    """Generator for stream `name` under `master_seed`.

    `index` separates repeated uses of one stream (e.g. shuffle per epoch).
    """
    if name not in STREAMS:
        raise KeyError(f"unknown rng stream {name!r}")
    ss = np.random.SeedSequence(entropy=int(master_seed),
                                spawn_key=(STREAMS[name], int(index)))
    return np.random.Generator(np.random.PCG64(ss))
