"""Decoder layer with guided query positions.

Between decoder layers the query position embedding is recomputed from the
boxes decoded out of the newest object queries: boxes -> sinusoidal
encoding -> linear projection -> next layer's query position.  Ablation
modes:

    gqpos     guided update every layer (the full mechanism)
    fixed     the layer-0 learned query position is reused everywhere
    parallel  guided once from the first decoded boxes, then frozen
    no_pe     boxes linearly lifted to width d, skipping the encoding
    no_fc     the encoding used directly as query position (needs d == d_model)

Box decoding is reference-point based: the box head emits deltas whose
(x, y) part is added, in inverse-sigmoid space, to the query's current
reference point (the center of its previous box; layer 0 uses learned
reference points).
"""

from __future__ import annotations

from dataclasses import dataclass

from . import ops
from .attention import AttentionInternals, MhaParams, cross_attention, self_attention
from .posenc import BoxEncodingConfig
from .sia import FeaturePyramid, sia_cross_attention
from .tape import DualTensor, ShapeError, Tape

MODES = ("gqpos", "fixed", "parallel", "no_pe", "no_fc")


@dataclass
class QueryState:
    """Per-layer decoder state: object queries, their position embedding,
    the boxes decoded so far and the reference points for the next decode."""

    q_content: DualTensor
    q_pos: DualTensor
    ref: DualTensor                   # (nq, 2) centers in (0, 1)
    boxes: DualTensor | None = None   # (nq, 4); None before the first layer
    layer_index: int = 0


@dataclass
class BoxMlp:
    w1: DualTensor
    b1: DualTensor
    w2: DualTensor
    b2: DualTensor
    w3: DualTensor
    b3: DualTensor

    @classmethod
    def from_leaves(cls, leaves: dict, prefix: str) -> "BoxMlp":
        return cls(*(leaves[f"{prefix}.{n}"] for n in ("w1", "b1", "w2", "b2", "w3", "b3")))


@dataclass
class DecoderMemory:
    """Key set for cross-attention: either a stitched pyramid or one flat
    grid of keys with its positional encodings."""

    pyramid: FeaturePyramid | None = None
    keys: DualTensor | None = None
    key_pos: DualTensor | None = None
    level_shapes: list | None = None
    level_offsets: list | None = None

    def shapes(self) -> list:
        return self.pyramid.level_shapes if self.pyramid is not None else list(self.level_shapes)

    def offsets(self) -> list:
        return list(self.pyramid.offsets) if self.pyramid is not None else list(self.level_offsets)


@dataclass
class LayerParams:
    self_attn: MhaParams
    cross_attn: MhaParams
    ln1: tuple
    ln2: tuple
    ln3: tuple
    ffn: tuple                 # (w1, b1, w2, b2)
    gate: tuple | None = None  # (w, b) for the prior gate


@dataclass
class SharedHeads:
    class_head: tuple          # (w, b)
    box_mlp: BoxMlp
    guide_proj: tuple | None = None  # (w, b), d_model -> d
    guide_lift: tuple | None = None  # (w, b), 4 -> d (mode no_pe)
    guide_mlp: BoxMlp | None = None  # separate box head for guiding only


def _mlp_raw(tape: Tape, q: DualTensor, mlp: BoxMlp) -> DualTensor:
    h = ops.relu(tape, ops.linear(tape, q, mlp.w1, mlp.b1))
    h = ops.relu(tape, ops.linear(tape, h, mlp.w2, mlp.b2))
    return ops.linear(tape, h, mlp.w3, mlp.b3)


def predict_positions(tape: Tape, q_content: DualTensor, mlp: BoxMlp) -> DualTensor:
    """Plain box decode: 3-layer MLP (d -> d -> d -> 4), relu hidden,
    sigmoid output; no reference offset."""
    return ops.sigmoid(tape, _mlp_raw(tape, q_content, mlp))


def decode_boxes(tape: Tape, q_content: DualTensor, mlp: BoxMlp, ref: DualTensor) -> DualTensor:
    """Reference-point decode: the (x, y) deltas shift the reference in
    inverse-sigmoid space, (h, w) come straight from the head."""
    raw = _mlp_raw(tape, q_content, mlp)
    xy = ops.add(tape, ops.slice_cols(tape, raw, 0, 2), ops.inverse_sigmoid(tape, ref))
    return ops.sigmoid(tape, ops.concat_cols(tape, [xy, ops.slice_cols(tape, raw, 2, 4)]))


def guide_query_position(tape: Tape, boxes: DualTensor, cfg: BoxEncodingConfig,
                         proj_w: DualTensor, proj_b: DualTensor) -> DualTensor:
    """Encode boxes sinusoidally and project to the query width."""
    pe = ops.box_encoding(tape, boxes, cfg.d_model, cfg.temperature)
    return ops.linear(tape, pe, proj_w, proj_b)


@dataclass
class LayerOutput:
    cls: DualTensor
    boxes: DualTensor
    record: object
    bundle: object | None = None
    trace: dict | None = None


def _next_query_pos(tape: Tape, state: QueryState, boxes: DualTensor, q_new: DualTensor,
                    shared: SharedHeads, cfg) -> DualTensor:
    mode = cfg.mode
    if mode == "fixed":
        return state.q_pos
    if mode == "parallel" and state.layer_index > 0:
        return state.q_pos
    guide_boxes = boxes
    if shared.guide_mlp is not None:
        guide_boxes = decode_boxes(tape, q_new, shared.guide_mlp, state.ref)
    if cfg.detach_guide:
        guide_boxes = ops.detach(guide_boxes)
    if mode == "no_pe":
        w, b = shared.guide_lift
        return ops.linear(tape, guide_boxes, w, b)
    if mode == "no_fc":
        if cfg.d != cfg.d_model:
            raise ShapeError(f"mode no_fc requires d == d_model, got {cfg.d} != {cfg.d_model}")
        return ops.box_encoding(tape, guide_boxes, cfg.d_model, cfg.temperature)
    w, b = shared.guide_proj
    return guide_query_position(tape, guide_boxes, BoxEncodingConfig(cfg.d_model, cfg.temperature), w, b)


def decoder_layer_step(tape: Tape, state: QueryState, memory: DecoderMemory,
                       lp: LayerParams, shared: SharedHeads, cfg,
                       trace: bool = False) -> tuple:
    """One decoder layer: query self-attention, cross-attention over the
    memory, feed-forward, prediction heads, then the mode-specific query
    position update for the next layer.  Returns (new_state, LayerOutput)."""
    if cfg.mode not in MODES:
        raise ValueError(f"unknown decoder mode {cfg.mode!r}; expected one of {MODES}")
    pap = cfg.pos_after_projection
    q = state.q_content

    sa = self_attention(tape, q, state.q_pos, lp.self_attn, pos_after_projection=pap)
    q = ops.layer_norm_rows(tape, ops.add(tape, q, sa), *lp.ln1)

    capture = AttentionInternals() if trace else None
    bundle = None
    if memory.pyramid is not None:
        ca, record, bundle = sia_cross_attention(
            tape, q, state.q_pos, memory.pyramid, lp.cross_attn, lp.gate,
            cfg.attention_prior, pos_after_projection=pap,
            beta_shared_heads=cfg.beta_shared_heads, capture=capture)
    else:
        ca, record = cross_attention(
            tape, q, state.q_pos, memory.keys, memory.key_pos, memory.keys, lp.cross_attn,
            pos_after_projection=pap, level_shapes=memory.level_shapes,
            level_offsets=memory.level_offsets, capture=capture)
    q = ops.layer_norm_rows(tape, ops.add(tape, q, ca), *lp.ln2)

    w1, b1, w2, b2 = lp.ffn
    ff = ops.linear(tape, ops.relu(tape, ops.linear(tape, q, w1, b1)), w2, b2)
    q_new = ops.layer_norm_rows(tape, ops.add(tape, q, ff), *lp.ln3)

    cls_w, cls_b = shared.class_head
    cls = ops.linear(tape, q_new, cls_w, cls_b)
    boxes = decode_boxes(tape, q_new, shared.box_mlp, state.ref)
    next_q_pos = _next_query_pos(tape, state, boxes, q_new, shared, cfg)

    trace_info = None
    if trace:
        trace_info = {
            "q_content_in": state.q_content.values.copy(),
            "q_pos_in": state.q_pos.values.copy(),
            "ref_in": state.ref.values.copy(),
            "q_content_out": q_new.values.copy(),
            "boxes": boxes.values.copy(),
            "next_q_pos": next_q_pos.values.copy(),
            "attn": capture,
        }
    new_state = QueryState(q_content=q_new, q_pos=next_q_pos,
                           ref=ops.slice_cols(tape, boxes, 0, 2),
                           boxes=boxes, layer_index=state.layer_index + 1)
    return new_state, LayerOutput(cls=cls, boxes=boxes, record=record, bundle=bundle, trace=trace_info)
