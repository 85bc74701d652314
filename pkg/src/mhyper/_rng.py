"""Named random sub-streams derived from one integer seed."""

import zlib

import numpy as np
import torch


def _seed_sequence(seed: int, stream: str, *extra: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), zlib.crc32(stream.encode()), *map(int, extra)])


def np_stream(seed: int, stream: str, *extra: int) -> np.random.Generator:
    return np.random.default_rng(_seed_sequence(seed, stream, *extra))


def torch_stream(seed: int, stream: str, *extra: int) -> torch.Generator:
    value = int(_seed_sequence(seed, stream, *extra).generate_state(1, dtype=np.uint64)[0] >> 1)
    return torch.Generator().manual_seed(value)
