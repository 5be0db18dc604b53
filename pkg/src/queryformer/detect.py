"""The full detection head: learned queries, decoder stack, shared
prediction heads, per-layer auxiliary outputs and attention-map export."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import featurize as fz
from . import ops, posenc
from .attention import MhaParams, self_attention
from .gqpos import (MODES, BoxMlp, DecoderMemory, LayerOutput, LayerParams,
                    QueryState, SharedHeads, decoder_layer_step)
from .params import ParamStore, add_attention, add_layer_norm, add_linear
from .rng import param_rng
from .sia import build_pyramid
from .tape import DualTensor, ShapeError, Tape


@dataclass
class HeadConfig:
    num_queries: int = 12
    num_layers: int = 3
    d: int = 64
    heads: int = 4
    d_model: int = 64
    num_classes: int = 3
    grid_h: int = 16
    grid_w: int = 16
    mode: str = "gqpos"
    multiscale: bool = False
    feature_fusion: bool = False
    attention_prior: bool = False
    detach_guide: bool = False
    separate_guide_mlp: bool = False
    pos_after_projection: bool = False
    level_embed: bool = False
    beta_shared_heads: bool = False
    encoder: bool = True
    aux_loss: bool = True
    temperature: float = 10000.0

    # Scenes hold at most 4 objects.
    MAX_OBJECTS = 4

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.num_layers < 1:
            raise ValueError(f"num_layers must be >= 1, got {self.num_layers}")
        if self.num_queries < self.MAX_OBJECTS:
            raise ValueError(f"num_queries must be >= {self.MAX_OBJECTS}, got {self.num_queries}")
        if self.d % self.heads != 0:
            raise ValueError(f"d={self.d} must be divisible by heads={self.heads}")
        if self.d_model % 8 != 0:
            raise ValueError(f"d_model={self.d_model} must be a multiple of 8")
        if self.d % 4 != 0:
            raise ValueError(f"d={self.d} must be divisible by 4 for grid encodings")
        if self.grid_h % 2 or self.grid_w % 2 or self.grid_h < 4 or self.grid_w < 4:
            raise ValueError(f"grid {self.grid_h}x{self.grid_w} must be even and at least 4x4")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.mode == "no_fc" and self.d != self.d_model:
            raise ValueError(f"mode no_fc requires d == d_model, got d={self.d}, d_model={self.d_model}")
        if self.attention_prior and not self.multiscale:
            raise ValueError("attention_prior requires multiscale")
        if self.feature_fusion and not self.multiscale:
            raise ValueError("feature_fusion requires multiscale")
        if self.level_embed and not self.multiscale:
            raise ValueError("level_embed requires multiscale")
        if self.beta_shared_heads and not self.attention_prior:
            raise ValueError("beta_shared_heads requires attention_prior")

    @property
    def low_shape(self) -> tuple:
        return self.grid_h // 2, self.grid_w // 2

    @property
    def high_shape(self) -> tuple:
        return self.grid_h, self.grid_w


@dataclass
class ForwardResult:
    layers: list                 # LayerOutput per decoder layer
    level_shapes: list
    level_offsets: list
    states: list = field(default_factory=list)  # populated when traced

    def records(self) -> list:
        return [lo.record for lo in self.layers]

    def class_logits(self, layer: int = -1) -> np.ndarray:
        return self.layers[layer].cls.values

    def boxes(self, layer: int = -1) -> np.ndarray:
        return self.layers[layer].boxes.values


# Class-head bias starts at the focal prior so untrained scores sit near
# this probability.
FOCAL_PRIOR = 0.01

# Prior gate starts near (not exactly at) zero so the flag is observable
# before training.
GATE_INIT_STD = 0.01
LEVEL_EMBED_STD = 0.02


def build_params(cfg: HeadConfig, seed: int) -> ParamStore:
    store = ParamStore()
    high_w, low_w = fz.patch_widths(cfg.num_classes)
    add_linear(store, seed, "featurizer.high", high_w, cfg.d)
    add_linear(store, seed, "featurizer.low", low_w, cfg.d)

    if cfg.encoder:
        add_attention(store, seed, "encoder.attn", cfg.d)
        add_layer_norm(store, "encoder.ln1", cfg.d)
        add_linear(store, seed, "encoder.ffn1", cfg.d, 4 * cfg.d)
        add_linear(store, seed, "encoder.ffn2", 4 * cfg.d, cfg.d)
        add_layer_norm(store, "encoder.ln2", cfg.d)

    store.add("query.content", param_rng(seed, "query.content").normal(0.0, 1.0, (cfg.num_queries, cfg.d)))
    store.add("query.pos0", param_rng(seed, "query.pos0").normal(0.0, 1.0, (cfg.num_queries, cfg.d)))
    store.add("query.ref0", param_rng(seed, "query.ref0").uniform(-2.0, 2.0, (cfg.num_queries, 2)))

    for i in range(cfg.num_layers):
        add_attention(store, seed, f"decoder.{i}.self_attn", cfg.d)
        add_attention(store, seed, f"decoder.{i}.cross_attn", cfg.d)
        add_layer_norm(store, f"decoder.{i}.ln1", cfg.d)
        add_layer_norm(store, f"decoder.{i}.ln2", cfg.d)
        add_layer_norm(store, f"decoder.{i}.ln3", cfg.d)
        add_linear(store, seed, f"decoder.{i}.ffn1", cfg.d, 4 * cfg.d)
        add_linear(store, seed, f"decoder.{i}.ffn2", 4 * cfg.d, cfg.d)
        if cfg.attention_prior:
            cols = 1 if cfg.beta_shared_heads else cfg.heads
            gate_w = param_rng(seed, f"decoder.{i}.gate.w").normal(0.0, GATE_INIT_STD, (cfg.d, cols))
            store.add(f"decoder.{i}.gate.w", gate_w)
            store.add(f"decoder.{i}.gate.b", np.zeros(cols))

    if cfg.multiscale and cfg.feature_fusion:
        add_linear(store, seed, "pyramid.fuse_sl", cfg.d, cfg.d)
        add_linear(store, seed, "pyramid.fuse_lh", cfg.d, cfg.d)
    if cfg.multiscale and cfg.level_embed:
        store.add("pyramid.level_embed",
                  param_rng(seed, "pyramid.level_embed").normal(0.0, LEVEL_EMBED_STD, (3, cfg.d)))

    add_linear(store, seed, "head.class", cfg.d, cfg.num_classes)
    store["head.class.b"] = np.full(cfg.num_classes, -np.log((1.0 - FOCAL_PRIOR) / FOCAL_PRIOR))
    add_linear(store, seed, "head.box1", cfg.d, cfg.d)
    add_linear(store, seed, "head.box2", cfg.d, cfg.d)
    add_linear(store, seed, "head.box3", cfg.d, 4, zero=True)

    if cfg.mode in ("gqpos", "parallel"):
        add_linear(store, seed, "guide.proj", cfg.d_model, cfg.d)
    if cfg.mode == "no_pe":
        add_linear(store, seed, "guide.lift", 4, cfg.d)
    if cfg.separate_guide_mlp and cfg.mode != "fixed":
        add_linear(store, seed, "guide.mlp1", cfg.d, cfg.d)
        add_linear(store, seed, "guide.mlp2", cfg.d, cfg.d)
        add_linear(store, seed, "guide.mlp3", cfg.d, 4, zero=True)
    return store


def _box_mlp(leaves: dict, p1: str, p2: str, p3: str) -> BoxMlp:
    return BoxMlp(leaves[f"{p1}.w"], leaves[f"{p1}.b"], leaves[f"{p2}.w"], leaves[f"{p2}.b"],
                  leaves[f"{p3}.w"], leaves[f"{p3}.b"])


class DetectionHead:
    def __init__(self, cfg: HeadConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.seed = seed
        self.store = build_params(cfg, seed)

    # -- sub-blocks ---------------------------------------------------------

    def _encoder_layer(self, tape: Tape, leaves: dict, f_low: DualTensor,
                       pe_low: DualTensor) -> DualTensor:
        cfg = self.cfg
        params = MhaParams.from_leaves(leaves, "encoder.attn", cfg.heads, cfg.d)
        sa = self_attention(tape, f_low, pe_low, params, pos_after_projection=cfg.pos_after_projection)
        x = ops.layer_norm_rows(tape, ops.add(tape, f_low, sa),
                                leaves["encoder.ln1.gain"], leaves["encoder.ln1.shift"])
        ff = ops.linear(tape, ops.relu(tape, ops.linear(tape, x, leaves["encoder.ffn1.w"], leaves["encoder.ffn1.b"])),
                        leaves["encoder.ffn2.w"], leaves["encoder.ffn2.b"])
        return ops.layer_norm_rows(tape, ops.add(tape, x, ff),
                                   leaves["encoder.ln2.gain"], leaves["encoder.ln2.shift"])

    def _build_memory(self, tape: Tape, leaves: dict, patches: tuple) -> DecoderMemory:
        cfg = self.cfg
        f_high, f_low = fz.featurize(tape, leaves, patches)
        lh, lw = cfg.low_shape
        pe_low = ops.constant(posenc.encode_grid(lh, lw, cfg.d, cfg.temperature))
        if cfg.encoder:
            f_low = self._encoder_layer(tape, leaves, f_low, pe_low)
        if not cfg.multiscale:
            return DecoderMemory(keys=f_low, key_pos=pe_low,
                                 level_shapes=[(lh, lw)], level_offsets=[0, lh * lw])
        fusion = None
        if cfg.feature_fusion:
            fusion = ((leaves["pyramid.fuse_sl.w"], leaves["pyramid.fuse_sl.b"]),
                      (leaves["pyramid.fuse_lh.w"], leaves["pyramid.fuse_lh.b"]))
        level_embed = leaves.get("pyramid.level_embed") if cfg.level_embed else None
        pyramid = build_pyramid(tape, f_high, cfg.high_shape, f_low, (lh, lw),
                                fuse=cfg.feature_fusion, fusion=fusion,
                                level_embed=level_embed, temperature=cfg.temperature)
        return DecoderMemory(pyramid=pyramid)

    def _layer_params(self, leaves: dict, i: int) -> LayerParams:
        cfg = self.cfg
        gate = None
        if cfg.attention_prior:
            gate = (leaves[f"decoder.{i}.gate.w"], leaves[f"decoder.{i}.gate.b"])
        return LayerParams(
            self_attn=MhaParams.from_leaves(leaves, f"decoder.{i}.self_attn", cfg.heads, cfg.d),
            cross_attn=MhaParams.from_leaves(leaves, f"decoder.{i}.cross_attn", cfg.heads, cfg.d),
            ln1=(leaves[f"decoder.{i}.ln1.gain"], leaves[f"decoder.{i}.ln1.shift"]),
            ln2=(leaves[f"decoder.{i}.ln2.gain"], leaves[f"decoder.{i}.ln2.shift"]),
            ln3=(leaves[f"decoder.{i}.ln3.gain"], leaves[f"decoder.{i}.ln3.shift"]),
            ffn=(leaves[f"decoder.{i}.ffn1.w"], leaves[f"decoder.{i}.ffn1.b"],
                 leaves[f"decoder.{i}.ffn2.w"], leaves[f"decoder.{i}.ffn2.b"]),
            gate=gate)

    def _shared_heads(self, leaves: dict) -> SharedHeads:
        cfg = self.cfg
        guide_proj = None
        if cfg.mode in ("gqpos", "parallel"):
            guide_proj = (leaves["guide.proj.w"], leaves["guide.proj.b"])
        guide_lift = None
        if cfg.mode == "no_pe":
            guide_lift = (leaves["guide.lift.w"], leaves["guide.lift.b"])
        guide_mlp = None
        if cfg.separate_guide_mlp and cfg.mode != "fixed":
            guide_mlp = _box_mlp(leaves, "guide.mlp1", "guide.mlp2", "guide.mlp3")
        return SharedHeads(class_head=(leaves["head.class.w"], leaves["head.class.b"]),
                           box_mlp=_box_mlp(leaves, "head.box1", "head.box2", "head.box3"),
                           guide_proj=guide_proj, guide_lift=guide_lift, guide_mlp=guide_mlp)

    # -- forward ------------------------------------------------------------

    def forward(self, tape: Tape, leaves: dict, patches: tuple, trace: bool = False) -> ForwardResult:
        """Run every decoder layer, retaining each layer's predictions and
        attention records."""
        cfg = self.cfg
        memory = self._build_memory(tape, leaves, patches)
        state = QueryState(q_content=leaves["query.content"], q_pos=leaves["query.pos0"],
                           ref=ops.sigmoid(tape, leaves["query.ref0"]), layer_index=0)
        shared = self._shared_heads(leaves)
        result = ForwardResult(layers=[], level_shapes=memory.shapes(), level_offsets=memory.offsets())
        if trace:
            result.states.append(state)
        for i in range(cfg.num_layers):
            state, out = decoder_layer_step(tape, state, memory, self._layer_params(leaves, i),
                                            shared, cfg, trace=trace)
            result.layers.append(out)
            if trace:
                result.states.append(state)
        return result

    def predict(self, render: np.ndarray, trace: bool = False) -> ForwardResult:
        """Forward pass on a fresh tape with the master parameters."""
        tape = Tape()
        patches = fz.patch_matrices(render)
        return self.forward(tape, self.store.leaves(), patches, trace=trace)


def export_attention_maps(records: list, layer: int, query: int) -> list:
    """Head-averaged post-softmax weights for one (layer, query), folded
    back to each level's grid and max-normalized to [0, 1]."""
    if not 0 <= layer < len(records):
        raise IndexError(f"layer {layer} out of range (have {len(records)})")
    record = records[layer]
    avg = record.averaged()
    if not 0 <= query < avg.shape[0]:
        raise IndexError(f"query {query} out of range (have {avg.shape[0]})")
    row = avg[query]
    maps = []
    for (h, w), j0, j1 in zip(record.level_shapes, record.level_offsets[:-1], record.level_offsets[1:]):
        grid = row[j0:j1].reshape(h, w).copy()
        peak = grid.max()
        if peak > 0.0:
            grid /= peak
        maps.append(grid)
    return maps


def attention_mass_in_box(record, query: int, box) -> list:
    """Per-level share of one query's head-averaged attention that falls on
    cells whose centers lie inside the box (x, y, h, w)."""
    x, y, bh, bw = box
    row = record.averaged()[query]
    masses = []
    for (h, w), j0, j1 in zip(record.level_shapes, record.level_offsets[:-1], record.level_offsets[1:]):
        grid = row[j0:j1].reshape(h, w)
        ys = (np.arange(h) + 0.5) / h
        xs = (np.arange(w) + 0.5) / w
        inside = (np.abs(ys[:, None] - y) <= bh / 2) & (np.abs(xs[None, :] - x) <= bw / 2)
        masses.append(float(grid[inside].sum()))
    return masses
