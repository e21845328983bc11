"""Seed streams derived from one root seed.

Every random purpose (fold partitions, data generation, bootstrap, ...)
gets its own stream keyed by ``(root, purpose, counter)`` through
``numpy.random.SeedSequence``'s spawn key, so streams never overlap and a
stream's draws do not depend on how many other streams were used.
"""

from __future__ import annotations

import zlib

import numpy as np

_PURPOSES = {}


def _purpose_id(purpose: str) -> int:
    if purpose not in _PURPOSES:
        _PURPOSES[purpose] = zlib.crc32(purpose.encode())
    return _PURPOSES[purpose]


def seed_sequence(root: int, purpose: str, counter: int = 0) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(root), spawn_key=(_purpose_id(purpose), int(counter)))


def stream(root: int, purpose: str, counter: int = 0) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(root, purpose, counter))


def child_seed(root: int, purpose: str, counter: int = 0) -> int:
    """A 32-bit integer seed for APIs that take plain integers."""
    return int(seed_sequence(root, purpose, counter).generate_state(1)[0])
