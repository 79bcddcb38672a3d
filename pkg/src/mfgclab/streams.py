"""Counter-based random streams.

Every stochastic routine in the package derives its generators through
`stream`, keyed by a root seed plus structural indices (scenario, path,
player, purpose tag).  Streams are therefore independent of evaluation
order and worker count: the same (seed, indices) tuple always yields the
same draws.
"""

import numpy as np

_MASK = (1 << 64) - 1


def stream(seed, *indices):
    """Return a Generator keyed by ``seed`` and structural indices."""
    spawn_key = tuple(int(idx) & _MASK for idx in indices)
    seq = np.random.SeedSequence(entropy=int(seed) & _MASK, spawn_key=spawn_key)
    return np.random.Generator(np.random.Philox(seq))


# Purpose tags keep draws for different roles out of each other's streams.
TAG_NOISE = 1
TAG_COMMON = 2
TAG_INITIAL = 3
TAG_DIRECTIONS = 4
TAG_VALIDATE = 5
TAG_OPTIMIZER = 6
