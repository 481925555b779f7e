"""Deterministic seed derivation.

Every run takes one root seed; independent random streams are derived from
it with short string labels, so adding a new consumer never shifts the
numbers drawn by existing ones.
"""

import zlib

import numpy as np


def child_sequence(seed, label):
    return np.random.SeedSequence([int(seed), zlib.crc32(label.encode("utf8"))])


def rng_for(seed, label):
    """A numpy Generator seeded from (root seed, label)."""
    return np.random.default_rng(child_sequence(seed, label))
