"""Sinusoidal positional encodings for box coordinates and grid cells.

encode_scalar follows the interleaved ladder
    out[2j]   = sin(pos / temperature**(2j/dims))
    out[2j+1] = cos(pos / temperature**(2j/dims))
with the position used as-is (no 2*pi scaling).  Boxes concatenate four
equal segments in (x, y, h, w) order; grid cells concatenate a row segment
then a column segment evaluated at half-cell centers.  These functions are
parameter-free and return plain arrays; the differentiable box path lives
in ops.box_encoding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ops import inv_frequencies
from .tape import ShapeError


@dataclass(frozen=True)
class BoxEncodingConfig:
    d_model: int
    temperature: float = 10000.0

    def __post_init__(self):
        if self.d_model % 8 != 0:
            raise ShapeError(f"d_model must be a multiple of 8, got {self.d_model}")


def encode_scalar(pos: float, dims: int, temperature: float = 10000.0) -> np.ndarray:
    """Interleaved sin/cos ladder for a single position in [0, 1]."""
    if dims % 2 != 0:
        raise ShapeError(f"encode_scalar: dims must be even, got {dims}")
    inv_freq = inv_frequencies(dims, temperature)
    out = np.empty(dims)
    ang = pos * inv_freq
    out[0::2] = np.sin(ang)
    out[1::2] = np.cos(ang)
    return out


def encode_box(box, cfg: BoxEncodingConfig) -> np.ndarray:
    """Concatenated per-coordinate encodings of one (x, y, h, w) box."""
    box = np.asarray(box, dtype=np.float64)
    if box.shape != (4,):
        raise ShapeError(f"encode_box: box must have 4 coordinates, got shape {box.shape}")
    if np.any(box < 0.0) or np.any(box > 1.0):
        raise ValueError(f"encode_box: coordinates must lie in [0, 1], got {box}")
    seg = cfg.d_model // 4
    return np.concatenate([encode_scalar(float(c), seg, cfg.temperature) for c in box])


def encode_grid(h: int, w: int, dims: int, temperature: float = 10000.0) -> np.ndarray:
    """(h*w, dims) cell encodings: row segment then column segment, sampled
    at normalized cell centers ((i+0.5)/h, (j+0.5)/w).  Row-major layout."""
    if dims % 4 != 0:
        raise ShapeError(f"encode_grid: dims must be divisible by 4, got {dims}")
    half = dims // 2
    rows = np.stack([encode_scalar((i + 0.5) / h, half, temperature) for i in range(h)])
    cols = np.stack([encode_scalar((j + 0.5) / w, half, temperature) for j in range(w)])
    out = np.empty((h * w, dims))
    for i in range(h):
        out[i * w : (i + 1) * w, :half] = rows[i]
        out[i * w : (i + 1) * w, half:] = cols
    return out
