"""Deterministic seed tree.

Every piece of randomness in the package is drawn from a counter-based
Philox generator addressed by (root seed, path).  Identical root seed and
path always give an identical stream; distinct paths give statistically
independent streams.  Path components may be strings or ints.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["substream", "spawn_key"]


def _component_ints(component: str | int) -> tuple[int, ...]:
    if isinstance(component, (int, np.integer)):
        return (int(component) & 0xFFFFFFFF, (int(component) >> 32) & 0xFFFFFFFF)
    digest = hashlib.sha256(str(component).encode("utf-8")).digest()
    return tuple(int.from_bytes(digest[i : i + 4], "little") for i in range(0, 8, 4))


def spawn_key(*path: str | int) -> tuple[int, ...]:
    """Flatten a path into a SeedSequence spawn key."""
    key: list[int] = []
    for comp in path:
        key.extend(_component_ints(comp))
    return tuple(key)


def substream(root_seed: int, *path: str | int) -> np.random.Generator:
    """Generator for the stream addressed by `path` under `root_seed`."""
    seq = np.random.SeedSequence(root_seed, spawn_key=spawn_key(*path))
    return np.random.Generator(np.random.Philox(seq))
