"""Seed derivation.

Every random stream is a ``numpy.random.Generator`` built from
``SeedSequence(master_seed, spawn_key=labels)``.  String labels are mapped to
integers with CRC32, so a stream depends only on the master seed and its
labels, never on the order in which streams are created.
"""

import zlib

import numpy as np


def _label_key(label):
    if isinstance(label, (int, np.integer)):
        if label < 0:
            raise ValueError("integer stream labels must be non-negative")
        return int(label)
    return zlib.crc32(str(label).encode("utf-8"))


def derive_seed_sequence(master_seed, *labels):
    return np.random.SeedSequence(int(master_seed), spawn_key=tuple(_label_key(l) for l in labels))


def derive_rng(master_seed, *labels):
    return np.random.default_rng(derive_seed_sequence(master_seed, *labels))


def child_seed(master_seed, *labels):
    """Integer seed for APIs that take a plain master seed."""
    return int(derive_seed_sequence(master_seed, *labels).generate_state(2, np.uint64)[0] >> np.uint64(1))
