"""Seed derivation. Every random stream is a PCG64 generator keyed by a hash
of (master seed, purpose, index...), so streams never overlap by accident and
resuming at step N only needs N."""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master: int, *parts) -> int:
    h = hashlib.sha256(str(int(master)).encode())
    for part in parts:
        h.update(b"\x1f")
        h.update(str(part).encode())
    return int.from_bytes(h.digest()[:8], "little")


def make_rng(master: int, *parts) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(master, *parts)))
