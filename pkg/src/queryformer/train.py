"""Training loop: decoupled-weight-decay Adam over per-scene gradients.

Each step draws ``batch_size`` fresh scenes from the train stream (scene
index = step * batch_size + slot), accumulates per-scene gradients on
independent tapes and applies their mean.  Scenes may be processed by a
thread pool (QF_THREADS); results are always reduced in slot order, so the
metrics stream is bitwise reproducible for a given seed and config.  The
learning rate drops by 10x at ``lr_drop_step`` (default: 80% of steps).
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .detect import DetectionHead
from .featurize import patch_matrices
from .matchloss import CostWeights, detection_loss
from .scenes import make_scene
from .tape import Tape


@dataclass
class TrainConfig:
    steps: int = 3000
    lr: float = 1e-3
    lr_drop_step: int = -1  # -1: drop at 80% of steps
    batch_size: int = 4
    seed: int = 0
    weight_decay: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def validate(self) -> None:
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")

    def effective_drop_step(self) -> int:
        return self.lr_drop_step if self.lr_drop_step >= 0 else int(0.8 * self.steps)


class AdamW:
    """Adam with decoupled weight decay; state keyed by parameter name."""

    def __init__(self, store, cfg: TrainConfig):
        self.store = store
        self.cfg = cfg
        self.t = 0
        self.m = {n: np.zeros_like(store[n]) for n in store.names()}
        self.v = {n: np.zeros_like(store[n]) for n in store.names()}

    def step(self, grads: dict, lr: float) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.adam_beta1 ** self.t
        bc2 = 1.0 - c.adam_beta2 ** self.t
        decay = 1.0 - lr * c.weight_decay
        step_scale = lr / bc1
        inv_sqrt_bc2 = 1.0 / np.sqrt(bc2)
        for name in self.store.names():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= c.adam_beta1
            m += (1.0 - c.adam_beta1) * g
            v *= c.adam_beta2
            g *= g
            v += (1.0 - c.adam_beta2) * g
            denom = np.sqrt(v)
            denom *= inv_sqrt_bc2
            denom += c.adam_eps
            np.divide(m, denom, out=denom)
            denom *= step_scale
            p = self.store[name]
            p *= decay
            p -= denom


class TrainDiverged(RuntimeError):
    def __init__(self, step: int, history: list):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step
        self.history = history


def _scene_pass(head: DetectionHead, tcfg: TrainConfig, weights: CostWeights, index: int):
    """Forward + backward for one scene; returns (breakdown, grads)."""
    cfg = head.cfg
    spec, render = make_scene(tcfg.seed, "train", index, (cfg.grid_h, cfg.grid_w), cfg.num_classes)
    classes, boxes = spec.truth_arrays()
    tape = Tape()
    leaves = head.store.leaves()
    result = head.forward(tape, leaves, patch_matrices(render))
    total, breakdown = detection_loss(tape, result.layers, classes, boxes, weights,
                                      cfg.num_classes, aux_loss=cfg.aux_loss)
    tape.backward(total)
    grads = {name: leaves[name].grad for name in head.store.names()}
    return breakdown, grads


def thread_count() -> int:
    raw = os.environ.get("QF_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ValueError(f"QF_THREADS must be an integer, got {raw!r}") from exc
    return max(1, n)


def train(head: DetectionHead, tcfg: TrainConfig, weights: CostWeights | None = None,
          checkpoint_cb=None) -> list:
    """Run the loop; returns the per-step metric records.

    ``checkpoint_cb(tag)`` is invoked with "lrdrop" right before the
    learning rate drops.  Raises TrainDiverged (carrying partial history)
    if the loss goes non-finite.
    """
    tcfg.validate()
    weights = weights or CostWeights()
    threads = thread_count()
    opt = AdamW(head.store, tcfg)
    drop = tcfg.effective_drop_step()
    names = head.store.names()
    history: list[dict] = []

    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for step in range(tcfg.steps):
            if checkpoint_cb is not None and step == drop and step > 0:
                checkpoint_cb("lrdrop")
            lr = tcfg.lr * (0.1 if step >= drop else 1.0)
            indices = [step * tcfg.batch_size + b for b in range(tcfg.batch_size)]
            if pool is not None:
                results = list(pool.map(lambda i: _scene_pass(head, tcfg, weights, i), indices))
            else:
                results = [_scene_pass(head, tcfg, weights, i) for i in indices]

            grads = {n: results[0][1][n] for n in names}
            for breakdown, scene_grads in results[1:]:
                for n in names:
                    grads[n] += scene_grads[n]
            inv_b = 1.0 / tcfg.batch_size
            for n in names:
                grads[n] *= inv_b

            record = {
                "step": step,
                "lr": lr,
                "loss_total": float(np.mean([r[0]["loss_total"] for r in results])),
                "loss_class": float(np.mean([r[0]["loss_class"] for r in results])),
                "loss_l1": float(np.mean([r[0]["loss_l1"] for r in results])),
                "loss_giou": float(np.mean([r[0]["loss_giou"] for r in results])),
                "per_layer_losses": [float(v) for v in
                                     np.mean([r[0]["per_layer_losses"] for r in results], axis=0)],
            }
            if not np.isfinite(record["loss_total"]):
                raise TrainDiverged(step, history)
            opt.step(grads, lr)
            history.append(record)
    finally:
        if pool is not None:
            pool.shutdown()
    return history


def evaluate_ap(head: DetectionHead, eval_seed: int, count: int, iou_threshold: float = 0.5):
    """Toy AP of the final decoder layer over a held-out eval set."""
    from .apmetric import toy_ap

    cfg = head.cfg
    scenes = []
    predictions = []
    for i in range(count):
        spec, render = make_scene(eval_seed, "eval", i, (cfg.grid_h, cfg.grid_w), cfg.num_classes)
        result = head.predict(render)
        scenes.append(spec)
        predictions.append((result.class_logits(), result.boxes()))
    return toy_ap(predictions, scenes, cfg.num_classes, iou_threshold)
