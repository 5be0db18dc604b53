"""Deterministic random streams.

All randomness flows through ``RngStream``, a thin wrapper over NumPy's
PCG64 so the generator algorithm is pinned and documented.  Streams are
derived from (seed, namespace, index) triples; distinct namespaces can
never collide because the namespace tag is part of the seed material.
"""

from __future__ import annotations

import numpy as np

ALGORITHM = "pcg64"

# Namespace tags keep train / eval / viz scene streams disjoint by
# construction.
NAMESPACES = {"train": 0, "eval": 1, "viz": 2}


class RngStream:
    """Seeded deterministic generator (PCG64): same seed, same draws."""

    def __init__(self, seed_material):
        if isinstance(seed_material, (int, np.integer)):
            seed_material = [int(seed_material)]
        self.seed_material = tuple(int(s) for s in seed_material)
        self.algorithm = ALGORITHM
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed_material)))

    @classmethod
    def for_scene(cls, seed: int, namespace: str, index: int) -> "RngStream":
        if namespace not in NAMESPACES:
            raise ValueError(f"unknown rng namespace {namespace!r}; expected one of {sorted(NAMESPACES)}")
        return cls([seed, NAMESPACES[namespace], index])

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high, size=None):
        return self._gen.integers(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)


def param_rng(seed: int, name: str) -> np.random.Generator:
    """Per-parameter init stream keyed by the parameter's dot-path, so
    adding or removing parameters never shifts the others' draws."""
    material = [int(seed) & 0xFFFFFFFF] + list(name.encode("utf-8"))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(material)))
