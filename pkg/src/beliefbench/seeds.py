"""Deterministic seed derivation.

Every source of randomness in the pipeline draws from a named child seed of
the master seed, so any stage can be replayed in isolation.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch


def derive_seed(master: int, *tags: object) -> int:
    """Derive a 63-bit child seed from a master seed and a tag path."""
    h = hashlib.sha256()
    h.update(str(int(master)).encode())
    for tag in tags:
        h.update(b"/")
        h.update(str(tag).encode())
    return int.from_bytes(h.digest()[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def np_rng(master: int, *tags: object) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *tags))


def torch_gen(master: int, *tags: object) -> torch.Generator:
    gen = torch.Generator("cpu")
    gen.manual_seed(derive_seed(master, *tags))
    return gen
