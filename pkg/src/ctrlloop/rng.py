"""Deterministic seed derivation shared by every randomized component.

All randomness in the project flows from explicit integer seeds. Child seeds
are derived by hashing the parent seed together with string/int labels, so the
same (seed, labels) pair yields the same stream on any platform or process.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch

_MASK64 = (1 << 64) - 1


def derive_seed(root: int, *labels: int | str) -> int:
    """Derive a 63-bit child seed from a root seed and a label path."""
    h = hashlib.sha256()
    h.update(str(int(root)).encode())
    for label in labels:
        h.update(b"/")
        h.update(str(label).encode())
    return int.from_bytes(h.digest()[:8], "little") & (_MASK64 >> 1)


def np_rng(seed: int, *labels: int | str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *labels))


def torch_gen(seed: int, *labels: int | str) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(derive_seed(seed, *labels))
    return g
