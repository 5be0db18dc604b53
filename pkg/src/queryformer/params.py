"""Named parameter storage and initialization.

Master values live in a flat dict keyed by dot-paths.  Each forward pass
works on *leaves*: DualTensors sharing the master value buffers but owning
fresh gradient buffers, so independent scenes can run (and be reduced)
deterministically.  Initialization draws a dedicated stream per parameter
name, which keeps shared parameters bitwise identical across model
variants that add or remove other parameters.
"""

from __future__ import annotations

import numpy as np

from .rng import param_rng
from .tape import DualTensor


class ParamStore:
    def __init__(self):
        self._values: dict[str, np.ndarray] = {}

    def add(self, name: str, values: np.ndarray) -> None:
        if name in self._values:
            raise ValueError(f"duplicate parameter name {name!r}")
        self._values[name] = np.ascontiguousarray(values, dtype=np.float64)

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def __getitem__(self, name: str) -> np.ndarray:
        return self._values[name]

    def __setitem__(self, name: str, values: np.ndarray) -> None:
        self._values[name] = np.ascontiguousarray(values, dtype=np.float64)

    def names(self) -> list[str]:
        return list(self._values)

    def leaves(self) -> dict[str, DualTensor]:
        """Fresh-gradient views over the shared master values."""
        return {name: DualTensor(v, np.zeros_like(v)) for name, v in self._values.items()}

    def num_entries(self) -> int:
        return sum(v.size for v in self._values.values())

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        missing = set(self._values) - set(values)
        extra = set(values) - set(self._values)
        if missing or extra:
            raise ValueError(f"parameter set mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, v in values.items():
            if v.shape != self._values[name].shape:
                raise ValueError(f"shape mismatch for {name}: {v.shape} != {self._values[name].shape}")
            self._values[name] = np.ascontiguousarray(v, dtype=np.float64)


def xavier_uniform(seed: int, name: str, fan_in: int, fan_out: int, gain: float = 1.0) -> np.ndarray:
    limit = gain * np.sqrt(6.0 / (fan_in + fan_out))
    return param_rng(seed, name).uniform(-limit, limit, size=(fan_in, fan_out))


def add_linear(store: ParamStore, seed: int, prefix: str, fan_in: int, fan_out: int,
               gain: float = 1.0, zero: bool = False) -> None:
    if zero:
        store.add(prefix + ".w", np.zeros((fan_in, fan_out)))
    else:
        store.add(prefix + ".w", xavier_uniform(seed, prefix + ".w", fan_in, fan_out, gain))
    store.add(prefix + ".b", np.zeros(fan_out))


def add_layer_norm(store: ParamStore, prefix: str, dim: int) -> None:
    store.add(prefix + ".gain", np.ones(dim))
    store.add(prefix + ".shift", np.zeros(dim))


# Attention projections start small to keep early training stable.
ATTN_INIT_GAIN = 0.5


def add_attention(store: ParamStore, seed: int, prefix: str, d: int) -> None:
    for part in ("wq", "wk", "wv", "wo"):
        store.add(f"{prefix}.{part}", xavier_uniform(seed, f"{prefix}.{part}", d, d, ATTN_INIT_GAIN))
    for part in ("bq", "bk", "bv", "bo"):
        store.add(f"{prefix}.{part}", np.zeros(d))
