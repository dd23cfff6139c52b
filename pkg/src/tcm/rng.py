"""Named, counter-based random streams.

Every consumer asks for a stream by ``(seed, label, index)``.  Streams with
different labels never share state, so adding a new consumer cannot perturb
the draws of an existing one.
"""
from __future__ import annotations

import hashlib

import numpy as np


def _label_key(label: str) -> int:
    return int.from_bytes(hashlib.sha256(label.encode("utf-8")).digest()[:8], "little")


def stream(seed: int, label: str, index: int = 0) -> np.random.Generator:
    """Philox generator keyed by the master seed, a purpose label and an index."""
    seq = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, _label_key(label), int(index)])
    return np.random.Generator(np.random.Philox(seq))
