"""Counter-based random streams.

Every random draw in the package comes from a Philox generator keyed on
``(root_seed, purpose)``.  Sub-streams (one per epoch, per sample, ...) are
addressed by placing their indices in the high words of the 256-bit counter,
so a stream can be recreated in isolation without replaying its predecessors.
Serial and parallel consumers therefore see identical numbers.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1

# purpose tags; values are part of the reproducibility contract
FEATURES = 1
THETA = 2
TRAIN = 3
SAMPLE = 4
DENOISE = 5
VERIFY = 6
DATA = 7


def check_seed(seed) -> int:
    seed = int(seed)
    if not 0 <= seed <= MASK64:
        raise ValueError(f"seed must fit in an unsigned 64-bit integer, got {seed}")
    return seed


def stream(seed: int, purpose: int, *index: int) -> np.random.Generator:
    """Generator for ``(seed, purpose)`` positioned at sub-stream ``index``.

    At most two index words are supported; the low two counter words are left
    for the generator's own block counter.
    """
    if len(index) > 2:
        raise ValueError("at most two sub-stream indices")
    words = [0, 0] + [0] * (2 - len(index)) + [int(i) & MASK64 for i in index]
    key = (check_seed(seed) << 64) | (int(purpose) & MASK64)
    bitgen = np.random.Philox(key=key, counter=np.array(words, dtype=np.uint64))
    return np.random.Generator(bitgen)
