"""Counter-based random streams derived from a single master seed.

Every consumer asks for ``stream(seed, tag, *index)``; the tag names the
purpose (``"slow-noise"``, ``"latent"``, ...) and the index carries replicate
or iteration numbers. Streams with distinct (tag, index) are independent and
do not depend on the order in which they are created.
"""

import zlib

import numpy as np


def _tag_key(tag):
    return zlib.crc32(tag.encode("utf-8"))


def seed_sequence(seed, tag, *index):
    if seed < 0:
        raise ValueError("seed must be non-negative")
    return np.random.SeedSequence(entropy=int(seed), spawn_key=(_tag_key(tag), *map(int, index)))


def stream(seed, tag, *index):
    """Philox generator keyed by ``(seed, tag, *index)``."""
    return np.random.Generator(np.random.Philox(seed_sequence(seed, tag, *index)))


def child_seed(seed, tag, *index):
    """A 63-bit integer seed for a sub-computation that derives its own streams."""
    state = seed_sequence(seed, tag, *index).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1])) & ((1 << 63) - 1)
