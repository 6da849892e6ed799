"""Deterministic seed tree: master seed -> (purpose, round, zone, client) streams.

Every random draw in a run comes from a generator keyed by its coordinates, so the
result does not depend on execution order or worker count.
"""

from __future__ import annotations

from enum import IntEnum

import numpy as np


class Purpose(IntEnum):
    DATA = 0
    INIT = 1
    SAMPLE = 2
    ELECT = 3
    TRAIN = 4
    CLIENT_NOISE = 5
    ZONE_NOISE = 6
    AGG_NOISE = 7
    MASK = 8
    ATTACK = 9
    PARTITION = 10


class SeedTree:
    def __init__(self, master: int):
        self.master = int(master)

    def rng(self, purpose: Purpose, *key: int) -> np.random.Generator:
        spawn_key = (int(purpose),) + tuple(int(k) + 1 for k in key)
        return np.random.default_rng(np.random.SeedSequence(self.master, spawn_key=spawn_key))

    def pair_seed(self, round_: int, zone: int, i: int, j: int) -> int:
        """Shared mask seed for the client pair (i, j), i < j."""
        lo, hi = min(i, j), max(i, j)
        seq = np.random.SeedSequence(self.master, spawn_key=(int(Purpose.MASK), round_ + 1, zone + 1, lo + 1, hi + 1))
        return int(seq.generate_state(2, np.uint64)[0])
