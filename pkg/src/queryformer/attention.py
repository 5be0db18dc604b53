"""Multi-head attention with additive positional terms.

The query-side input is content + position, the key-side input is
keys + key position, and values carry no positional term.  By default the
positional sums happen before the learned projections (the convention this
decoder family inherits); ``pos_after_projection`` instead adds the raw
positional tensors to the projected content, which makes the logits
decompose exactly as content-term + position-term.

Logits are scaled by 1/sqrt(d/heads).  ``logit_hook`` lets callers rewrite
one head's pre-softmax logits (the cross-scale prior injection and the
shift-invariance tests both enter here).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .tape import DualTensor, ShapeError, Tape


@dataclass
class MhaParams:
    wq: DualTensor
    bq: DualTensor
    wk: DualTensor
    bk: DualTensor
    wv: DualTensor
    bv: DualTensor
    wo: DualTensor
    bo: DualTensor
    heads: int
    d: int

    def __post_init__(self):
        if self.d % self.heads != 0:
            raise ShapeError(f"width {self.d} not divisible by {self.heads} heads")

    @property
    def d_head(self) -> int:
        return self.d // self.heads

    @classmethod
    def from_leaves(cls, leaves: dict, prefix: str, heads: int, d: int) -> "MhaParams":
        return cls(*(leaves[f"{prefix}.{n}"] for n in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")),
                   heads=heads, d=d)


@dataclass
class AttentionRecord:
    """Post-softmax weights per head plus the key-axis geometry needed to
    fold them back onto the source grids."""

    head_weights: list = field(default_factory=list)   # each (nq, nk)
    level_shapes: list = field(default_factory=list)   # [(h, w), ...] in key order
    level_offsets: list = field(default_factory=list)  # len(levels) + 1 edges

    def averaged(self) -> np.ndarray:
        return np.mean(self.head_weights, axis=0)


@dataclass
class AttentionInternals:
    """Value snapshots used by the trace tests (logit decomposition)."""

    q_projected: np.ndarray | None = None
    q_pos_term: np.ndarray | None = None
    k_effective: np.ndarray | None = None


def _check_width(name: str, t: DualTensor, d: int) -> None:
    if t.ndim != 2 or t.shape[1] != d:
        raise ShapeError(f"{name}: expected (*, {d}), got {t.shape}")


def multi_head_attention(tape: Tape, q_content: DualTensor, q_pos: DualTensor,
                         keys: DualTensor, key_pos: DualTensor, values: DualTensor,
                         params: MhaParams, *, pos_after_projection: bool = False,
                         logit_hook=None, level_shapes=None, level_offsets=None,
                         capture: AttentionInternals | None = None):
    """Shared core; returns (output, AttentionRecord, per-head logit tensors)."""
    d = params.d
    for name, t in (("q_content", q_content), ("q_pos", q_pos), ("keys", keys),
                    ("key_pos", key_pos), ("values", values)):
        _check_width(name, t, d)
    if q_content.shape != q_pos.shape:
        raise ShapeError(f"q_content {q_content.shape} != q_pos {q_pos.shape}")
    if keys.shape != key_pos.shape:
        raise ShapeError(f"keys {keys.shape} != key_pos {key_pos.shape}")
    if keys.shape[0] != values.shape[0]:
        raise ShapeError(f"keys {keys.shape} and values {values.shape} disagree on row count")

    if pos_after_projection:
        q_lin = ops.linear(tape, q_content, params.wq, params.bq)
        q_eff = ops.add(tape, q_lin, q_pos)
        k_lin = ops.linear(tape, keys, params.wk, params.bk)
        k_eff = ops.add(tape, k_lin, key_pos)
        if capture is not None:
            capture.q_projected = q_lin.values.copy()
            capture.q_pos_term = q_pos.values.copy()
            capture.k_effective = k_eff.values.copy()
    else:
        q_eff = ops.linear(tape, ops.add(tape, q_content, q_pos), params.wq, params.bq)
        k_eff = ops.linear(tape, ops.add(tape, keys, key_pos), params.wk, params.bk)
    v_eff = ops.linear(tape, values, params.wv, params.bv)

    dh = params.d_head
    inv_scale = 1.0 / np.sqrt(dh)
    nk = keys.shape[0]
    if level_offsets is None:
        level_offsets = [0, nk]
    record = AttentionRecord(level_shapes=list(level_shapes or []), level_offsets=list(level_offsets))
    head_logits = []
    contexts = []
    for h in range(params.heads):
        qh = ops.slice_cols(tape, q_eff, h * dh, (h + 1) * dh)
        kh = ops.slice_cols(tape, k_eff, h * dh, (h + 1) * dh)
        vh = ops.slice_cols(tape, v_eff, h * dh, (h + 1) * dh)
        logits = ops.scale(tape, ops.matmul_nt(tape, qh, kh), inv_scale)
        if logit_hook is not None:
            logits = logit_hook(tape, h, logits)
        head_logits.append(logits)
        weights = ops.softmax_rows(tape, logits)
        record.head_weights.append(weights.values.copy())
        contexts.append(ops.matmul(tape, weights, vh))
    merged = contexts[0] if len(contexts) == 1 else ops.concat_cols(tape, contexts)
    out = ops.linear(tape, merged, params.wo, params.bo)
    return out, record, head_logits


def cross_attention(tape: Tape, q_content: DualTensor, q_pos: DualTensor,
                    keys: DualTensor, key_pos: DualTensor, values: DualTensor,
                    params: MhaParams, *, pos_after_projection: bool = False,
                    logit_hook=None, level_shapes=None, level_offsets=None,
                    capture: AttentionInternals | None = None):
    """Single-scale cross-attention; returns (output, AttentionRecord)."""
    out, record, _ = multi_head_attention(
        tape, q_content, q_pos, keys, key_pos, values, params,
        pos_after_projection=pos_after_projection, logit_hook=logit_hook,
        level_shapes=level_shapes, level_offsets=level_offsets, capture=capture)
    return out, record


def self_attention(tape: Tape, x: DualTensor, pos: DualTensor, params: MhaParams,
                   *, pos_after_projection: bool = False) -> DualTensor:
    """cross_attention with queries = keys = values = x."""
    out, _ = cross_attention(tape, x, pos, x, pos, x, params,
                             pos_after_projection=pos_after_projection)
    return out
