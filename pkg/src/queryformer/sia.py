"""Cross-scale attention fusion.

A three-level feature pyramid (extra-small, low, high) is stitched along
the key axis so one softmax normalizes over every scale jointly.  The
low-resolution slice of each head's pre-softmax logits is bilinearly
interpolated onto the high-resolution grid and added, scaled by a learned
per-query gate, to the high-resolution slice before the softmax.  Only the
high-resolution slice receives the prior.

Stitching order is fixed and documented: extra-small, then low, then high.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops, posenc
from .attention import AttentionInternals, AttentionRecord, MhaParams, multi_head_attention
from .tape import DualTensor, ShapeError, Tape


@dataclass
class PyramidLevel:
    h: int
    w: int
    feat: DualTensor  # (h*w, d)

    def __post_init__(self):
        if self.feat.shape[0] != self.h * self.w:
            raise ShapeError(f"level feature {self.feat.shape} does not hold a {self.h}x{self.w} grid")

    @property
    def cells(self) -> int:
        return self.h * self.w


@dataclass
class FeaturePyramid:
    levels: list          # [extra-small, low, high]
    stitched: DualTensor  # (sum cells, d)
    key_pos: DualTensor   # same shape as stitched
    offsets: list         # level start indices plus total, len(levels)+1

    def __post_init__(self):
        total = sum(lv.cells for lv in self.levels)
        if self.stitched.shape[0] != total:
            raise ShapeError(f"stitched rows {self.stitched.shape[0]} != level cells {total}")
        if self.key_pos.shape != self.stitched.shape:
            raise ShapeError(f"key_pos {self.key_pos.shape} != stitched {self.stitched.shape}")
        expect = [0]
        for lv in self.levels:
            expect.append(expect[-1] + lv.cells)
        if list(self.offsets) != expect:
            raise ShapeError(f"offsets {self.offsets} inconsistent with level sizes (expected {expect})")

    @property
    def level_shapes(self) -> list:
        return [(lv.h, lv.w) for lv in self.levels]


@dataclass
class AttentionBundle:
    """Per-head snapshots of the fused attention computation."""

    logits_stitched: list = field(default_factory=list)  # post-fusion, pre-softmax (nq, sum cells)
    logits_low: list = field(default_factory=list)       # low-res slice (nq, cells_low)
    prior_high: list = field(default_factory=list)       # interpolated prior (nq, cells_high)
    beta: np.ndarray | None = None                       # (nq, heads) gate values
    level_shapes: list = field(default_factory=list)
    level_offsets: list = field(default_factory=list)


def _broadcast_rows(tape: Tape, row: DualTensor, n: int) -> DualTensor:
    """Tile a (1, d) tensor over n rows, gradient summed back."""
    return ops.matmul(tape, ops.constant(np.ones((n, 1))), row)


def build_pyramid(tape: Tape, f_high: DualTensor, high_shape: tuple, f_low: DualTensor,
                  low_shape: tuple, fuse: bool, fusion=None, level_embed: DualTensor | None = None,
                  temperature: float = 10000.0) -> FeaturePyramid:
    """Assemble the stitched pyramid from featurizer levels.

    The extra-small level is a 2x2 average-pool of the low level.  With
    ``fuse`` a top-down pass adds each coarser level, linearly projected
    then bilinearly upsampled, into the next finer level before stitching.
    ``fusion`` supplies the two projections as ((w, b), (w, b)) for
    small->low and low->high.  ``level_embed`` (3, d) rows are added to the
    per-level key positions when given.
    """
    hh, hw = high_shape
    lh, lw = low_shape
    if f_high.shape[0] != hh * hw or f_low.shape[0] != lh * lw:
        raise ShapeError(f"featurizer levels {f_high.shape}/{f_low.shape} do not match grids {high_shape}/{low_shape}")
    if f_high.shape[1] != f_low.shape[1]:
        raise ShapeError(f"level widths differ: {f_high.shape[1]} vs {f_low.shape[1]}")
    d = f_high.shape[1]
    sh, sw = (lh + 1) // 2, (lw + 1) // 2
    f_small = ops.avg_pool_grid(tape, f_low, lh, lw)

    if fuse:
        if fusion is None:
            raise ValueError("build_pyramid: fuse=True requires fusion projections")
        (w_sl, b_sl), (w_lh, b_lh) = fusion
        f_low = ops.add(tape, f_low,
                        ops.resize_grid(tape, ops.linear(tape, f_small, w_sl, b_sl), sh, sw, lh, lw))
        f_high = ops.add(tape, f_high,
                         ops.resize_grid(tape, ops.linear(tape, f_low, w_lh, b_lh), lh, lw, hh, hw))

    levels = [PyramidLevel(sh, sw, f_small), PyramidLevel(lh, lw, f_low), PyramidLevel(hh, hw, f_high)]
    stitched = ops.concat_rows(tape, [lv.feat for lv in levels])

    pos_parts = []
    for idx, lv in enumerate(levels):
        pe = ops.constant(posenc.encode_grid(lv.h, lv.w, d, temperature))
        if level_embed is not None:
            vec = ops.slice_rows(tape, level_embed, idx, idx + 1)
            pe = ops.add(tape, pe, _broadcast_rows(tape, vec, lv.cells))
        pos_parts.append(pe)
    key_pos = ops.concat_rows(tape, pos_parts)

    offsets = [0]
    for lv in levels:
        offsets.append(offsets[-1] + lv.cells)
    return FeaturePyramid(levels=levels, stitched=stitched, key_pos=key_pos, offsets=offsets)


def sia_cross_attention(tape: Tape, q_content: DualTensor, q_pos: DualTensor,
                        pyramid: FeaturePyramid, params: MhaParams,
                        gate: tuple | None, enable_prior: bool, *,
                        pos_after_projection: bool = False, beta_shared_heads: bool = False,
                        capture: AttentionInternals | None = None):
    """Stitched multi-scale cross-attention with the optional logit prior.

    Returns (output, AttentionRecord, AttentionBundle).  With
    ``enable_prior`` False the computation is exactly the stitched
    single-scale path (no slicing happens), so it reduces bitwise to
    plain cross-attention over the concatenated key set.
    """
    off = pyramid.offsets
    lv_small, lv_low, lv_high = pyramid.levels
    bundle = AttentionBundle(level_shapes=pyramid.level_shapes, level_offsets=list(off))

    hook = None
    if enable_prior:
        if gate is None:
            raise ValueError("sia_cross_attention: enable_prior requires gate parameters")
        gate_w, gate_b = gate
        expected_cols = 1 if beta_shared_heads else params.heads
        if gate_w.shape != (params.d, expected_cols):
            raise ShapeError(f"gate weight {gate_w.shape} != ({params.d}, {expected_cols})")
        beta = ops.linear(tape, ops.add(tape, q_content, q_pos), gate_w, gate_b)
        bundle.beta = np.broadcast_to(beta.values, (beta.shape[0], params.heads)).copy()

        def hook(tape_, head, logits):
            a_small = ops.slice_cols(tape_, logits, off[0], off[1])
            a_low = ops.slice_cols(tape_, logits, off[1], off[2])
            a_high = ops.slice_cols(tape_, logits, off[2], off[3])
            prior = ops.resize_cols(tape_, a_low, lv_low.h, lv_low.w, lv_high.h, lv_high.w)
            beta_col = beta if beta_shared_heads else ops.slice_cols(tape_, beta, head, head + 1)
            if beta_shared_heads and beta.shape[1] != 1:
                raise ShapeError(f"shared gate must have one column, got {beta.shape}")
            fused_high = ops.add(tape_, a_high, ops.scale_rows(tape_, prior, beta_col))
            fused = ops.concat_cols(tape_, [a_small, a_low, fused_high])
            bundle.logits_low.append(a_low.values.copy())
            bundle.prior_high.append(prior.values.copy())
            bundle.logits_stitched.append(fused.values.copy())
            return fused

    out, record, head_logits = multi_head_attention(
        tape, q_content, q_pos, pyramid.stitched, pyramid.key_pos, pyramid.stitched, params,
        pos_after_projection=pos_after_projection, logit_hook=hook,
        level_shapes=pyramid.level_shapes, level_offsets=off, capture=capture)

    if not enable_prior:
        for logits in head_logits:
            bundle.logits_stitched.append(logits.values.copy())
            bundle.logits_low.append(logits.values[:, off[1]:off[2]].copy())
    return out, record, bundle
