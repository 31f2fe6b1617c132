"""Counter-based RNG derivation so every pipeline stage reseeds independently."""
from __future__ import annotations

import hashlib

import numpy as np


def derive_rng(*parts) -> np.random.Generator:
    """A Philox generator keyed by hashing the given parts.

    Stable across platforms and processes; callers pass a tuple like
    (seed, "stage", step, image_id) to get a stream unique to that event.
    """
    tag = "\x1f".join(repr(p) for p in parts).encode()
    digest = hashlib.sha256(tag).digest()
    key = np.frombuffer(digest[:16], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
