"""Seeded random streams.

All randomness goes through :func:`stream`, which builds a numpy ``Philox``
(counter-based) generator keyed by ``(seed, label, *indices)``.  A replicate's
draws therefore depend only on its own key, never on the order or the process
in which replicates are executed.

Labels in use: ``"simulate"``, ``"true-psi"``, ``"bootstrap"``, ``"split"``,
``"sample"`` and ``"population"``.
"""

import zlib

import numpy as np


def label_key(label):
    return zlib.crc32(label.encode("utf-8"))


def stream(seed, label, *indices):
    """Return an independent generator for ``(seed, label, *indices)``."""
    if seed < 0:
        raise ValueError("seed must be non-negative")
    seq = np.random.SeedSequence(
        entropy=int(seed), spawn_key=(label_key(label),) + tuple(int(i) for i in indices)
    )
    return np.random.Generator(np.random.Philox(seq))
