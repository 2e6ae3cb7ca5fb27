"""Labelled, counter-based random streams derived from one global seed."""

from __future__ import annotations

import hashlib
from typing import Iterable

import numpy as np


def _label_key(label: str) -> int:
    return int.from_bytes(hashlib.sha256(label.encode("utf-8")).digest()[:8], "little")


def stream_seed(seed: int, label: str) -> int:
    """A 63-bit integer seed for APIs that take plain integer seeds."""
    ss = np.random.SeedSequence([int(seed), _label_key(label)])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def seed_streams(seed: int, labels: Iterable[str]) -> dict[str, np.random.Generator]:
    """One independent Philox generator per label; labels must be distinct."""
    labels = list(labels)
    dupes = sorted({l for l in labels if labels.count(l) > 1})
    if dupes:
        raise ValueError(f"duplicate stream labels: {dupes}")
    return {
        l: np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), _label_key(l)])))
        for l in labels
    }
