"""Keyed, counter-based random streams.

Every random draw in the package comes from a generator keyed by the run's
master seed plus a tuple of integers naming the work item (epoch, image
index, episode index, ...). Streams do not depend on execution order, so a
parallel map over images gives the same bytes as a serial one.
"""

from __future__ import annotations

import numpy as np

RNG_SCHEME = "philox-seedseq-v1"

# stream tags, second key after the master seed
KEY_INIT = 0x1001
KEY_HEAD = 0x1002
KEY_EPISODE = 0x1003
KEY_SWEEP = 0x1004
KEY_SUBSAMPLE = 0x1005
KEY_PARTNER = 0x1006


def keyed_rng(master_seed: int, *keys: int) -> np.random.Generator:
    entropy = [int(master_seed) & 0xFFFFFFFFFFFFFFFF]
    for k in keys:
        k = int(k)
        if k < 0:
            raise ValueError(f"stream keys must be non-negative, got {k}")
        entropy.append(k)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
