"""Deterministic seed fan-out.

One master seed expands into independent named streams, so changing what
one phase consumes (say, poison selection) cannot perturb another phase
(say, weight init). Streams are derived by hashing, not by sequential
draws, which keeps them order-independent.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master: int, label: str) -> int:
    """Map (master, label) to a stable 64-bit stream seed."""
    digest = hashlib.sha256(f"{master}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def stream(master: int, label: str) -> np.random.Generator:
    """Fresh PRNG for one named phase of a run."""
    return np.random.default_rng(derive_seed(master, label))
