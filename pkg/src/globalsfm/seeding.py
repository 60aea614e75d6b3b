"""Deterministic seed derivation for parallel tasks.

Every stochastic component in the package draws its randomness from a
generator keyed by a content hash of (global seed, task key).  Results are
therefore independent of worker count, scheduling order and PYTHONHASHSEED.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stable_seed(*parts) -> int:
    """64-bit unsigned seed derived from a SHA-256 hash over the parts.

    Parts are mixed via their ``repr``, so ints, floats, strings and tuples
    of those all hash stably across processes.
    """
    h = hashlib.sha256()
    for part in parts:
        h.update(repr(part).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest()[:8], "little")


def rng_for(*parts) -> np.random.Generator:
    """Fresh numpy generator keyed by the given parts."""
    return np.random.default_rng(stable_seed(*parts))
