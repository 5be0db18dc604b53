"""Flat key=value run configuration.

One ``key = value`` per line, ``#`` starts a comment.  Parsing is strict:
unknown keys and malformed values fail with the offending name.  The
canonical serialization lists every field in declaration order, so
serialize(parse(text)) is a stable normal form and parsing it again is a
no-op.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .detect import HeadConfig
from .matchloss import CostWeights
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # model
    num_queries: int = 12
    num_layers: int = 3
    d: int = 64
    heads: int = 4
    d_model: int = 64
    num_classes: int = 3
    grid_h: int = 16
    grid_w: int = 16
    # mechanism switches
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
    # matching cost and loss weights
    w_class: float = 2.0
    w_l1: float = 5.0
    w_giou: float = 2.0
    loss_class: float = 2.0
    loss_l1: float = 5.0
    loss_giou: float = 2.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    # training
    steps: int = 3000
    lr: float = 1e-3
    lr_drop_step: int = -1
    batch_size: int = 4
    seed: int = 0
    weight_decay: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    # evaluation / output
    eval_scenes: int = 200
    out_dir: str = "out"

    def head_config(self) -> HeadConfig:
        return HeadConfig(
            num_queries=self.num_queries, num_layers=self.num_layers, d=self.d,
            heads=self.heads, d_model=self.d_model, num_classes=self.num_classes,
            grid_h=self.grid_h, grid_w=self.grid_w, mode=self.mode,
            multiscale=self.multiscale, feature_fusion=self.feature_fusion,
            attention_prior=self.attention_prior, detach_guide=self.detach_guide,
            separate_guide_mlp=self.separate_guide_mlp,
            pos_after_projection=self.pos_after_projection,
            level_embed=self.level_embed, beta_shared_heads=self.beta_shared_heads,
            encoder=self.encoder, aux_loss=self.aux_loss)

    def train_config(self) -> TrainConfig:
        return TrainConfig(steps=self.steps, lr=self.lr, lr_drop_step=self.lr_drop_step,
                           batch_size=self.batch_size, seed=self.seed,
                           weight_decay=self.weight_decay, adam_beta1=self.adam_beta1,
                           adam_beta2=self.adam_beta2, adam_eps=self.adam_eps)

    def cost_weights(self) -> CostWeights:
        return CostWeights(w_class=self.w_class, w_l1=self.w_l1, w_giou=self.w_giou,
                           l_class=self.loss_class, l_l1=self.loss_l1, l_giou=self.loss_giou,
                           alpha=self.focal_alpha, gamma=self.focal_gamma)

    def validate(self) -> None:
        try:
            self.head_config().validate()
            self.train_config().validate()
            self.cost_weights().validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.eval_scenes < 1:
            raise ConfigError(f"eval_scenes must be >= 1, got {self.eval_scenes}")

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}


_FIELDS = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _parse_value(key: str, text: str):
    kind = _FIELDS[key]
    if kind == "bool":
        low = text.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"field {key}: expected true/false, got {text!r}")
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
    except ValueError:
        raise ConfigError(f"field {key}: cannot parse {text!r} as {kind}") from None
    return text


def parse_config(text: str) -> RunConfig:
    cfg = RunConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        setattr(cfg, key, _parse_value(key, value))
    cfg.validate()
    return cfg


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def serialize_config(cfg: RunConfig) -> str:
    lines = [f"{name} = {_format_value(getattr(cfg, name))}" for name in _FIELDS]
    return "\n".join(lines) + "\n"


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return parse_config(text)
