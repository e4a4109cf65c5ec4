"""
Seed splitting.

Every random stream of a run is derived from the master seed as
SeedSequence(entropy=master_seed, spawn_key=(stream, *key)) and reduced to one
64-bit word. Streams:

    DATA    key ()                  dataset generation (unless DataConfig.seed is set)
    INIT    key ()                  global parameter init w^0
    SAMPLE  key (round,)            participating-client sampling
    BATCH   key (round, client_id)  minibatch schedule of one local round

The BATCH stream depends only on (master_seed, round, client_id), so every
algorithm run with the same master seed consumes the same minibatches.
"""

from enum import IntEnum

import numpy as np


class Stream(IntEnum):
    DATA = 0
    INIT = 1
    SAMPLE = 2
    BATCH = 3


def derive_seed(master_seed: int, stream: Stream, *key: int) -> int:
    seq = np.random.SeedSequence(entropy=master_seed, spawn_key=(int(stream), *key))
    return int(seq.generate_state(1, dtype=np.uint64)[0])


def data_seed(master_seed: int) -> int:
    return derive_seed(master_seed, Stream.DATA)


def init_seed(master_seed: int) -> int:
    return derive_seed(master_seed, Stream.INIT)


def sampling_seed(master_seed: int, round_index: int) -> int:
    return derive_seed(master_seed, Stream.SAMPLE, round_index)


def batch_seed(master_seed: int, round_index: int, client_id: int) -> int:
    return derive_seed(master_seed, Stream.BATCH, round_index, client_id)
