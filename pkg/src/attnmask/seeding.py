"""Deterministic seed derivation.

Every stochastic step derives its own stream from the run seed plus a
string context, so per-sample results do not depend on worker count or
iteration order. blake2b keeps the derivation stable across platforms
and Python versions (hash() is salted per process, so it is unusable here).
"""

from __future__ import annotations

import hashlib

import numpy as np

U64_MAX = 2**64 - 1


def derive_seed(seed: int, *parts: object) -> int:
    """Map a base seed and context parts to an independent u64 seed."""
    if not 0 <= seed <= U64_MAX:
        raise ValueError(f"seed {seed} outside [0, 2**64)")
    key = ":".join([str(seed)] + [str(p) for p in parts])
    digest = hashlib.blake2b(key.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def rng_for(seed: int, *parts: object) -> np.random.Generator:
    """Generator seeded from derive_seed(seed, *parts)."""
    return np.random.default_rng(derive_seed(seed, *parts))
