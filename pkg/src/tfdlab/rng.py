"""Named, independent random streams derived from one integer seed."""
from __future__ import annotations

import numpy as np

SeedStream = np.random.Generator

# stream keys; any fixed tuple of ints gives an independent stream
TEACHER_INIT = 1
TEACHER_TRAIN = 2
DISTILL_STEP = 3
EVAL = 4
HELDOUT = 5
TRACE = 6
ABLATE = 7


def seed_stream(seed: int, *keys: int) -> SeedStream:
    seq = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.PCG64(seq))
