"""Deterministic fan-out of a single top-level seed into per-component streams.

Every source of randomness in the toolkit (candidate sampling, input
noising, parameter init, batch order) draws from a generator derived here,
so one integer seed pins an entire run.
"""

import hashlib

import numpy as np


def derive_seed(root: int, *tags) -> int:
    """Derive a 64-bit sub-seed from `root` and a path of string/int tags.

    Stable across processes and platforms (uses blake2s, not hash()).
    """
    h = hashlib.blake2s(digest_size=8)
    h.update(str(int(root)).encode("utf-8"))
    for tag in tags:
        h.update(b"/")
        h.update(str(tag).encode("utf-8"))
    return int.from_bytes(h.digest(), "little")


def derive_rng(root: int, *tags) -> np.random.Generator:
    """A fresh PCG64 generator seeded from derive_seed(root, *tags)."""
    return np.random.default_rng(derive_seed(root, *tags))
