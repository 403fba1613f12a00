"""Independent random streams derived from one master seed.

A stream is keyed by (purpose, worker_id, outer_step), so adding or removing
a worker never shifts the data order of any other worker, and evaluation
never consumes training randomness.
"""

import numpy as np

PURPOSES = {"init": 1, "pretrain": 2, "data": 3, "drop": 4, "eval": 5, "shard": 6}


def _key(master_seed: int, purpose: str, worker_id: int = 0, outer_step: int = 0):
    return [int(master_seed), PURPOSES[purpose], int(worker_id), int(outer_step)]


def stream(master_seed: int, purpose: str, worker_id: int = 0,
           outer_step: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(
        np.random.SeedSequence(_key(master_seed, purpose, worker_id, outer_step))))


def seed_for(master_seed: int, purpose: str, worker_id: int = 0, outer_step: int = 0) -> int:
    """A plain integer seed, for APIs that take one."""
    ss = np.random.SeedSequence(_key(master_seed, purpose, worker_id, outer_step))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
