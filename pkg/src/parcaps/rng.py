"""Deterministic, splittable random streams.

Every stochastic consumer (weight init, batch sampling, augmentation, data
synthesis) gets its own named stream derived from one run seed. Streams are
Philox counter-based generators keyed by a hash of (seed, name), so they are
independent of each other, of creation order, and of platform.
"""

from __future__ import annotations

import hashlib

import numpy as np


class RngPool:
    """Factory of named, mutually independent random generators."""

    def __init__(self, seed: int):
        self.seed = int(seed)

    def stream(self, name: str) -> np.random.Generator:
        """A fresh generator for `name`; same (seed, name) -> same sequence."""
        digest = hashlib.blake2b(
            f"{self.seed}/{name}".encode(), digest_size=16).digest()
        key = np.frombuffer(digest, dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))
