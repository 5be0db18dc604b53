"""Experiment runner.

    queryformer train --config cfg [--seed N] [--out DIR]
    queryformer eval --checkpoint ckpt --eval-seed N [--out FILE]
    queryformer visualize --checkpoint ckpt --scene-seed N --layer L --query Q --out DIR

train writes ``metrics.jsonl`` (one header record, then one record per
step with stable key order) plus ``checkpoint_final.qfc`` and, when the
schedule drops the learning rate mid-run, ``checkpoint_lrdrop.qfc``.
eval prints toy AP and writes a result record.  visualize writes one
binary PGM (P5) attention map per pyramid level, named
``attn_L{layer}_Q{query}_S{level}.pgm``.

Exit codes: 0 success, 2 configuration/usage errors, 3 runtime failures
(divergence).  QF_THREADS caps batch parallelism (default 1, which the
determinism guarantees assume).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, load_config, parse_config, serialize_config
from .detect import DetectionHead, attention_mass_in_box, export_attention_maps
from .featurize import patch_matrices
from .matchloss import match_layer
from .scenes import make_scene
from .train import TrainDiverged, evaluate_ap, train

METRICS_VERSION = 1


def _metric_line(record: dict) -> str:
    ordered = {k: record[k] for k in
               ("step", "lr", "loss_total", "loss_class", "loss_l1", "loss_giou", "per_layer_losses")}
    return json.dumps(ordered)


def write_pgm(path, grid: np.ndarray) -> None:
    """Binary portable graymap; pixel = round(255 * value in [0, 1])."""
    pixels = np.floor(np.clip(grid, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def _load_head(ckpt_path):
    config_text, values = load_checkpoint(ckpt_path)
    cfg = parse_config(config_text)
    head = DetectionHead(cfg.head_config(), seed=cfg.seed)
    head.store.load_values(values)
    return head, cfg


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    cfg.validate()
    out_dir = cfg.out_dir
    os.makedirs(out_dir, exist_ok=True)
    config_text = serialize_config(cfg)

    head = DetectionHead(cfg.head_config(), seed=cfg.seed)

    def checkpoint_cb(tag: str) -> None:
        save_checkpoint(os.path.join(out_dir, f"checkpoint_{tag}.qfc"), head.store, config_text)

    status = 0
    try:
        history = train(head, cfg.train_config(), cfg.cost_weights(), checkpoint_cb=checkpoint_cb)
    except TrainDiverged as exc:
        history = exc.history
        print(f"error: {exc}", file=sys.stderr)
        status = 3

    header = {"record": "header", "version": METRICS_VERSION, "config": cfg.as_dict()}
    with open(os.path.join(out_dir, "metrics.jsonl"), "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for record in history:
            fh.write(_metric_line(record) + "\n")
    if status == 0:
        save_checkpoint(os.path.join(out_dir, "checkpoint_final.qfc"), head.store, config_text)
    return status


def cmd_eval(args) -> int:
    head, cfg = _load_head(args.checkpoint)
    mean_ap, per_class = evaluate_ap(head, args.eval_seed, cfg.eval_scenes)
    print(f"toy_ap = {mean_ap:.6f}")
    for cls in sorted(per_class):
        print(f"class_{cls}_ap = {per_class[cls]:.6f}")
    record = {
        "checkpoint": args.checkpoint,
        "eval_seed": args.eval_seed,
        "eval_scenes": cfg.eval_scenes,
        "toy_ap": mean_ap,
        "per_class": {str(k): v for k, v in sorted(per_class.items())},
    }
    out_path = args.out or f"{args.checkpoint}.eval{args.eval_seed}.json"
    with open(out_path, "w") as fh:
        fh.write(json.dumps(record) + "\n")
    return 0


def cmd_visualize(args) -> int:
    head, cfg = _load_head(args.checkpoint)
    os.makedirs(args.out, exist_ok=True)
    spec, render = make_scene(args.scene_seed, "viz", 0, (cfg.grid_h, cfg.grid_w), cfg.num_classes)
    result = head.predict(render)
    maps = export_attention_maps(result.records(), args.layer, args.query)
    for level, grid in enumerate(maps):
        name = f"attn_L{args.layer}_Q{args.query}_S{level}.pgm"
        write_pgm(os.path.join(args.out, name), grid)
        print(f"wrote {name} ({grid.shape[1]}x{grid.shape[0]})")

    classes, boxes = spec.truth_arrays()
    assign = match_layer(result.class_logits(), result.boxes(), classes, boxes, head_weights(cfg))
    matched = {int(q): t for t, q in enumerate(assign.truth_to_query)}
    if args.query in matched:
        box = boxes[matched[args.query]]
        masses = attention_mass_in_box(result.records()[args.layer], args.query, box)
        per_level = " ".join(f"S{i}={m:.4f}" for i, m in enumerate(masses))
        print(f"attention mass in matched truth box (layer {args.layer}): {per_level}")
    else:
        print(f"query {args.query} is unmatched on this scene")
    return 0


def head_weights(cfg):
    return cfg.cost_weights()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="queryformer",
                                     description="toy detection-head experiment runner")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run a training loop from a config file")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--seed", type=int, default=None, help="override the config seed")
    p_train.add_argument("--out", default=None, help="override the config output directory")
    p_train.set_defaults(fn=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on held-out scenes")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--eval-seed", type=int, required=True)
    p_eval.add_argument("--out", default=None, help="result record path")
    p_eval.set_defaults(fn=cmd_eval)

    p_vis = sub.add_parser("visualize", help="export attention maps as PGM images")
    p_vis.add_argument("--checkpoint", required=True)
    p_vis.add_argument("--scene-seed", type=int, required=True)
    p_vis.add_argument("--layer", type=int, required=True)
    p_vis.add_argument("--query", type=int, required=True)
    p_vis.add_argument("--out", required=True)
    p_vis.set_defaults(fn=cmd_visualize)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except IndexError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
