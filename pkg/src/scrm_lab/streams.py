"""Deterministic random stream splitting.

Every random draw in a run comes from a generator keyed by
``(seed, rollout, purpose)``. Two runs sharing a seed therefore see the same
context and loss noise at rollout ``m`` whatever the policy did, and any batch
can be regenerated without replaying the ones before it.
"""
from __future__ import annotations

import numpy as np

PURPOSES = {
    "context": 0,
    "action": 1,
    "loss": 2,
    "eval": 3,
    "cv": 4,
    "restart": 5,
    "study": 6,
    "teacher": 7,
}


class SeedStreams:
    """Factory of independent generators derived from one 64-bit seed."""

    def __init__(self, seed: int, *prefix: int):
        if not 0 <= int(seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        self.seed = int(seed)
        self.prefix = tuple(int(p) for p in prefix)

    def get(self, rollout: int, purpose: str) -> np.random.Generator:
        key = self.prefix + (int(rollout), PURPOSES[purpose])
        return np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=key))

    def child(self, *key: int) -> "SeedStreams":
        return SeedStreams(self.seed, *(self.prefix + key))

    def __repr__(self):
        return f"SeedStreams({self.seed}, prefix={self.prefix})"
