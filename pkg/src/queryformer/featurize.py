"""Minimal trainable featurizer over rendered class-channel fields.

The high-resolution level projects each cell's zero-padded 3x3
neighborhood (all channels) to width d; the low-resolution level projects
non-overlapping 2x2 blocks, halving the grid.  Patch extraction is a fixed
gather of the render, so the trainable part is exactly the two linear
projections.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .tape import DualTensor, ShapeError, Tape

HIGH_PATCH = 3  # odd window, zero padded
LOW_PATCH = 2   # non-overlapping stride-2 blocks


def patch_matrices(render: np.ndarray) -> tuple:
    """(high, low) patch matrices from a (C, H, W) render.

    high: (H*W, C*9) rows of 3x3 neighborhoods, channel-major;
    low:  (H/2 * W/2, C*4) rows of 2x2 blocks.  H and W must be even.
    """
    if render.ndim != 3:
        raise ShapeError(f"render must be (C, H, W), got {render.shape}")
    c, h, w = render.shape
    if h % 2 or w % 2:
        raise ShapeError(f"render grid {h}x{w} must have even sides")
    pad = HIGH_PATCH // 2
    padded = np.pad(render, ((0, 0), (pad, pad), (pad, pad)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, (HIGH_PATCH, HIGH_PATCH), axis=(1, 2))
    high = np.ascontiguousarray(windows.transpose(1, 2, 0, 3, 4).reshape(h * w, c * HIGH_PATCH * HIGH_PATCH))
    blocks = render.reshape(c, h // 2, LOW_PATCH, w // 2, LOW_PATCH)
    low = np.ascontiguousarray(blocks.transpose(1, 3, 0, 2, 4).reshape((h // 2) * (w // 2), c * LOW_PATCH * LOW_PATCH))
    return high, low


def patch_widths(num_classes: int) -> tuple:
    return num_classes * HIGH_PATCH * HIGH_PATCH, num_classes * LOW_PATCH * LOW_PATCH


def featurize(tape: Tape, leaves: dict, patches: tuple) -> tuple:
    """Project the patch matrices to the two feature levels (high, low)."""
    p_high, p_low = patches
    if p_high.shape[1] != leaves["featurizer.high.w"].shape[0]:
        raise ShapeError(
            f"high patch width {p_high.shape[1]} != featurizer input {leaves['featurizer.high.w'].shape[0]}")
    if p_low.shape[1] != leaves["featurizer.low.w"].shape[0]:
        raise ShapeError(
            f"low patch width {p_low.shape[1]} != featurizer input {leaves['featurizer.low.w'].shape[0]}")
    f_high = ops.linear(tape, ops.constant(p_high), leaves["featurizer.high.w"], leaves["featurizer.high.b"])
    f_low = ops.linear(tape, ops.constant(p_low), leaves["featurizer.low.w"], leaves["featurizer.low.b"])
    return f_high, f_low
