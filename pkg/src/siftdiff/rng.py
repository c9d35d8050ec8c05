"""Deterministic random-stream derivation.

Every consumer of randomness derives its own generator from the master seed
plus a label path, e.g. ``stream(seed, "finetune", k, "reject")``. Streams are
independent of each other and of how work is scheduled, so the same
(seed, label path) always reproduces the same draws.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _label_to_int(label: int | str) -> int:
    if isinstance(label, (int, np.integer)):
        if label < 0:
            raise ValueError("stream labels must be non-negative")
        return int(label)
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def stream(master_seed: int, *labels: int | str) -> np.random.Generator:
    """Generator for the stream identified by (master_seed, labels)."""
    key = tuple(_label_to_int(lb) for lb in labels)
    seq = np.random.SeedSequence(entropy=int(master_seed), spawn_key=key)
    return np.random.Generator(np.random.PCG64(seq))
