"""Synthetic axis-aligned rectangle scenes.

A scene holds 1..4 rectangles with classes, each box (x, y, h, w)
normalized to the unit square with extents in [0.15, 0.6].  The render is
one indicator field per class (1 inside the rectangle, 0 outside, measured
at cell centers) plus Gaussian noise.  Scene geometry and noise come from
one RngStream per (seed, namespace, index), so train / eval / viz scenes
can never collide.

The line format serializes ground truth only (resolution, then
``class x y h w`` per object); renders are regenerated from a stream.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rng import RngStream

MIN_OBJECTS = 1
MAX_OBJECTS = 4
SIZE_RANGE = (0.15, 0.6)
NOISE_SIGMA = 0.05
IOU_CAP = 0.7
RESAMPLE_TRIES = 20


@dataclass
class SceneObject:
    cls: int
    x: float
    y: float
    h: float
    w: float

    def as_box(self) -> np.ndarray:
        return np.array([self.x, self.y, self.h, self.w])


@dataclass
class SceneSpec:
    grid_h: int
    grid_w: int
    objects: list = field(default_factory=list)

    def validate(self) -> None:
        if not MIN_OBJECTS <= len(self.objects) <= MAX_OBJECTS:
            raise ValueError(f"scene must hold {MIN_OBJECTS}..{MAX_OBJECTS} objects, got {len(self.objects)}")
        for o in self.objects:
            if not (SIZE_RANGE[0] <= o.h <= SIZE_RANGE[1] and SIZE_RANGE[0] <= o.w <= SIZE_RANGE[1]):
                raise ValueError(f"object extents {o.h}x{o.w} outside {SIZE_RANGE}")
            if o.x - o.w / 2 < 0 or o.x + o.w / 2 > 1 or o.y - o.h / 2 < 0 or o.y + o.h / 2 > 1:
                raise ValueError(f"object box leaves the unit square: {o}")

    def truth_arrays(self) -> tuple:
        classes = np.array([o.cls for o in self.objects], dtype=np.intp)
        boxes = np.stack([o.as_box() for o in self.objects])
        return classes, boxes


def _iou(a: SceneObject, b: SceneObject) -> float:
    iw = min(a.x + a.w / 2, b.x + b.w / 2) - max(a.x - a.w / 2, b.x - b.w / 2)
    ih = min(a.y + a.h / 2, b.y + b.h / 2) - max(a.y - a.h / 2, b.y - b.h / 2)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.h * a.w + b.h * b.w - inter)


def generate_scene(rng: RngStream, grid: tuple = (16, 16), num_classes: int = 3) -> SceneSpec:
    """Sample a scene; rectangles overlapping an earlier one above 0.7 IoU
    are resampled up to 20 times, then accepted as drawn."""
    count = int(rng.integers(MIN_OBJECTS, MAX_OBJECTS + 1))
    objects: list[SceneObject] = []
    for _ in range(count):
        for _ in range(RESAMPLE_TRIES):
            cls = int(rng.integers(0, num_classes))
            h = float(rng.uniform(*SIZE_RANGE))
            w = float(rng.uniform(*SIZE_RANGE))
            x = float(rng.uniform(w / 2, 1 - w / 2))
            y = float(rng.uniform(h / 2, 1 - h / 2))
            candidate = SceneObject(cls, x, y, h, w)
            if all(_iou(candidate, o) <= IOU_CAP for o in objects):
                break
        objects.append(candidate)
    spec = SceneSpec(grid[0], grid[1], objects)
    spec.validate()
    return spec


def render_scene(spec: SceneSpec, rng: RngStream, num_classes: int) -> np.ndarray:
    """(num_classes, H, W) indicator field plus seeded noise."""
    h, w = spec.grid_h, spec.grid_w
    out = np.zeros((num_classes, h, w))
    py = (np.arange(h) + 0.5) / h
    px = (np.arange(w) + 0.5) / w
    for o in spec.objects:
        inside = (np.abs(py[:, None] - o.y) <= o.h / 2) & (np.abs(px[None, :] - o.x) <= o.w / 2)
        out[o.cls][inside] = 1.0
    out += rng.normal(0.0, NOISE_SIGMA, out.shape)
    return out


def make_scene(seed: int, namespace: str, index: int, grid: tuple = (16, 16),
               num_classes: int = 3) -> tuple:
    """Deterministic (SceneSpec, render) for a stream coordinate; geometry
    and noise share the stream so the pair is one draw sequence."""
    rng = RngStream.for_scene(seed, namespace, index)
    spec = generate_scene(rng, grid, num_classes)
    return spec, render_scene(spec, rng, num_classes)


def make_eval_set(eval_seed: int, count: int, grid: tuple = (16, 16), num_classes: int = 3) -> list:
    if count < 1:
        raise ValueError(f"eval set must hold at least one scene, got {count}")
    return [make_scene(eval_seed, "eval", i, grid, num_classes) for i in range(count)]


# ---------------------------------------------------------------------------
# line serialization (ground truth only)

def scene_to_line(spec: SceneSpec) -> str:
    parts = [str(spec.grid_h), str(spec.grid_w)]
    for o in spec.objects:
        parts += [str(o.cls), repr(o.x), repr(o.y), repr(o.h), repr(o.w)]
    return " ".join(parts)


def scene_from_line(line: str) -> SceneSpec:
    toks = line.split()
    if len(toks) < 7 or (len(toks) - 2) % 5 != 0:
        raise ValueError(f"malformed scene line: {line!r}")
    grid_h, grid_w = int(toks[0]), int(toks[1])
    objects = []
    for i in range(2, len(toks), 5):
        objects.append(SceneObject(int(toks[i]), *(float(t) for t in toks[i + 1 : i + 5])))
    spec = SceneSpec(grid_h, grid_w, objects)
    spec.validate()
    return spec


def save_scenes(path, specs: list) -> None:
    with open(path, "w") as fh:
        for spec in specs:
            fh.write(scene_to_line(spec) + "\n")


def load_scenes(path) -> list:
    with open(path) as fh:
        return [scene_from_line(line) for line in fh if line.strip()]
