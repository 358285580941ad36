"""Deterministic seed derivation.

All randomness in the package flows from one master seed through
stable_hash-derived numpy SeedSequences, so any unit of work
(task, trajectory, training loop) can be re-derived independently of
execution order. System entropy is never read.
"""

from __future__ import annotations

import hashlib

import numpy as np

_SEP = b"\x1f"


def stable_hash(*parts) -> int:
    """64-bit hash of the string forms of ``parts``, stable across runs."""
    h = hashlib.blake2b(digest_size=8)
    for part in parts:
        h.update(str(part).encode("utf-8"))
        h.update(_SEP)
    return int.from_bytes(h.digest(), "little")


def unit_hash(*parts) -> float:
    """Deterministic uniform value in [0, 1) derived from ``parts``."""
    return stable_hash(*parts) / 2.0**64


def derive_rng(master_seed: int, *keys) -> np.random.Generator:
    """Generator for the stream identified by (master_seed, *keys)."""
    return np.random.default_rng(derive_seed_sequence(master_seed, *keys))


def derive_seed_sequence(master_seed: int, *keys) -> np.random.SeedSequence:
    entropy = [int(master_seed) & (2**64 - 1)] + [stable_hash(k) for k in keys]
    return np.random.SeedSequence(entropy)
