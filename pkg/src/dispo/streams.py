"""Deterministic named RNG streams.

Every random draw in the package flows from a single root seed through a
named stream, addressed by a path of labels, e.g.
``stream(seed, "rollout", update, prompt, k)``.  String labels are hashed
with SHA-256 so the mapping is stable across processes and platforms
(``hash()`` randomization never enters), and integer labels feed the seed
sequence directly.  Two distinct paths give independent generators; the
same path always gives the same generator.
"""

from __future__ import annotations

import hashlib

import numpy as np

Label = int | str


def _label_words(label: Label) -> tuple[int, ...]:
    if isinstance(label, (int, np.integer)):
        if label < 0:
            raise ValueError(f"stream labels must be non-negative, got {label}")
        return (int(label),)
    if isinstance(label, str):
        digest = hashlib.sha256(label.encode("utf-8")).digest()
        return tuple(int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4))
    raise TypeError(f"stream labels must be int or str, got {type(label).__name__}")


def seed_sequence(root: int, *path: Label) -> np.random.SeedSequence:
    words = [int(root)]
    for label in path:
        words.extend(_label_words(label))
    return np.random.SeedSequence(words)


def stream(root: int, *path: Label) -> np.random.Generator:
    """Generator for the named stream rooted at ``root``."""
    return np.random.default_rng(seed_sequence(root, *path))
