"""Named random streams derived from one master seed.

Each consumer asks for ``stream(master_seed, label, index)``; the stream
depends only on those three values, so adding a consumer never shifts the
numbers another consumer sees.
"""
from __future__ import annotations

import hashlib

import numpy as np


def _label_key(label: str) -> int:
    return int.from_bytes(hashlib.sha256(label.encode("utf-8")).digest()[:8], "little")


def stream(master_seed: int, label: str, index: int = 0) -> np.random.Generator:
    seq = np.random.SeedSequence(entropy=int(master_seed), spawn_key=(_label_key(label), int(index)))
    return np.random.Generator(np.random.PCG64(seq))
