"""Replicate seeding.

Every replicate draws from its own Philox stream keyed by (seed, replicate);
independent sub-streams of one replicate (branching, migration, marks) use
distinct values of the top counter word.  Results therefore do not depend on
how replicates are split across workers.
"""

import numpy as np

BRANCHING, MIGRATION, MARKS, SAMPLING = 0, 1, 2, 3
# block-keyed streams of the batch samplers (key is (seed, block) instead)
BATCH_SAMPLING, BATCH_MARKS = 4, 5

_MASK = (1 << 64) - 1


def stream(seed, replicate=0, sub=BRANCHING):
    key = np.array([int(seed) & _MASK, int(replicate) & _MASK], dtype=np.uint64)
    counter = np.array([0, 0, 0, int(sub)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(counter=counter, key=key))


def as_generator(rng):
    if isinstance(rng, np.random.Generator):
        return rng
    return stream(0 if rng is None else rng)


def derive(seed, *tags):
    """A new 64-bit seed from a seed and any number of string or int tags."""
    words = [int(seed) & _MASK]
    for t in tags:
        if isinstance(t, str):
            words.extend(t.encode())
        else:
            words.append(int(t) & _MASK)
    return int(np.random.SeedSequence(words).generate_state(1, np.uint64)[0])
