"""Named-stream seed derivation.

One master seed fans out into independent, order-stable streams keyed by a
path of names and indices (e.g. ``stream(seed, "flip", client_k)``).  Each
path element is hashed into the ``spawn_key`` of a ``SeedSequence``, so
consuming draws from one stream never perturbs any other, and adding a new
stage never shifts existing streams.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _key_word(element: object) -> int:
    digest = hashlib.sha256(str(element).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def seed_sequence(root: int, *path: object) -> np.random.SeedSequence:
    """SeedSequence for the stream named by ``path`` under master seed ``root``."""
    return np.random.SeedSequence(entropy=int(root), spawn_key=tuple(_key_word(p) for p in path))


def stream(root: int, *path: object) -> np.random.Generator:
    """Fresh generator for the named stream; same arguments, same draws."""
    return np.random.default_rng(seed_sequence(root, *path))


def derive_seed(root: int, *path: object) -> int:
    """Collapse a named stream into a plain integer seed for APIs that take one."""
    return int(seed_sequence(root, *path).generate_state(1, np.uint64)[0])
