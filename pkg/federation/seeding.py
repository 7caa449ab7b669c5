"""
Counter-based seed derivation.

Every random draw in a run is keyed by (purpose, round, device) under the
run's master seed, so the order in which devices are processed (or how many
threads process them) never changes a result.
"""
from enum import IntEnum

import numpy as np


class Purpose(IntEnum):
    INIT = 1
    SYNTHETIC_DATA = 2
    TEST_SPLIT = 3
    PARTITION = 4
    FEDAVG_SAMPLE = 5
    FORK_SAMPLE = 6
    LOCAL_TRAIN = 7
    MERGE_SAMPLE = 8
    MERGE_TRAIN = 9


class SeedStream:
    def __init__(self, master_seed):
        master_seed = int(master_seed)
        if master_seed < 0:
            raise ValueError(f"master seed must be >= 0, got {master_seed}")
        self.master_seed = master_seed

    def __repr__(self):
        return f"SeedStream({self.master_seed})"

    def sequence(self, purpose, round_index=0, device_id=0):
        return np.random.SeedSequence(
            self.master_seed,
            spawn_key=(int(purpose), int(round_index), int(device_id)),
        )

    def seed(self, purpose, round_index=0, device_id=0):
        """64-bit integer seed for APIs that take a plain seed"""
        low, high = self.sequence(purpose, round_index, device_id).generate_state(2, dtype=np.uint32)
        return int(low) | (int(high) << 32)

    def rng(self, purpose, round_index=0, device_id=0):
        return np.random.default_rng(self.sequence(purpose, round_index, device_id))
