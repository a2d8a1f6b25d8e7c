"""Sub-seed derivation.

Every random stream is seeded from the master seed plus a tuple of labels
(component, fold, trial, ...). The derivation is sha256 over the
``repr`` of the parts, truncated to 63 bits, so it is stable across runs,
platforms and Python versions.
"""

from __future__ import annotations

import hashlib
import random

import numpy as np


def derive_seed(master: int, *parts) -> int:
    payload = repr((int(master),) + tuple(str(p) for p in parts)).encode()
    return int.from_bytes(hashlib.sha256(payload).digest()[:8], "little") & ((1 << 63) - 1)


def rng_for(master: int, *parts) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *parts))


def seed_everything(seed: int) -> None:
    """Seed python, numpy and torch global state (torch only if importable)."""
    random.seed(seed)
    np.random.seed(seed % (2**32))
    try:
        import torch
    except ImportError:  # pragma: no cover
        return
    torch.manual_seed(seed)
