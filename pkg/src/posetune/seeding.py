"""Named deterministic RNG streams derived from one master seed."""

from __future__ import annotations

import hashlib

import numpy as np


def stream_seed(*parts) -> int:
    """Stable 64-bit seed from a master seed plus any hashable name parts."""
    digest = hashlib.blake2b("/".join(str(p) for p in parts).encode(), digest_size=8)
    return int.from_bytes(digest.digest(), "big")


def derive_rng(*parts) -> np.random.Generator:
    """Generator for the named sub-stream (same parts, same stream)."""
    return np.random.default_rng(stream_seed(*parts))
