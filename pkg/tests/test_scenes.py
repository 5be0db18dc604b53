"""Scene generation invariants, serialization, featurizer and the toy AP
metric."""

import numpy as np
import pytest

from queryformer import ops
from queryformer.apmetric import toy_ap
from queryformer.featurize import featurize, patch_matrices, patch_widths
from queryformer.gradcheck import grad_check
from queryformer.rng import NAMESPACES, RngStream
from queryformer.scenes import (MAX_OBJECTS, SIZE_RANGE, SceneObject, SceneSpec,
                                generate_scene, load_scenes, make_eval_set, make_scene,
                                render_scene, save_scenes, scene_from_line, scene_to_line)
from queryformer.tape import ShapeError, Tape


def test_same_seed_same_scene():
    a_spec, a_render = make_scene(7, "train", 3)
    b_spec, b_render = make_scene(7, "train", 3)
    assert a_spec == b_spec
    assert np.array_equal(a_render, b_render)


def test_different_namespaces_disjoint():
    assert len(set(NAMESPACES.values())) == len(NAMESPACES)
    t_spec, t_render = make_scene(7, "train", 3)
    e_spec, e_render = make_scene(7, "eval", 3)
    assert not np.array_equal(t_render, e_render)
    with pytest.raises(ValueError, match="namespace"):
        RngStream.for_scene(0, "bogus", 0)


def test_scene_sweep_invariants():
    counts = np.zeros(MAX_OBJECTS + 1)
    for i in range(10000):
        rng = RngStream.for_scene(0, "train", i)
        spec = generate_scene(rng)
        counts[len(spec.objects)] += 1
        for o in spec.objects:
            assert SIZE_RANGE[0] <= o.h <= SIZE_RANGE[1]
            assert SIZE_RANGE[0] <= o.w <= SIZE_RANGE[1]
            assert 0.0 <= o.x - o.w / 2 and o.x + o.w / 2 <= 1.0
            assert 0.0 <= o.y - o.h / 2 and o.y + o.h / 2 <= 1.0
    fractions = counts[1:] / 10000
    assert np.all(np.abs(fractions - 0.25) < 0.02)


def test_render_indicator_plus_noise():
    spec = SceneSpec(8, 8, [SceneObject(1, 0.5, 0.5, 0.5, 0.5)])
    render = render_scene(spec, RngStream(0), num_classes=3)
    assert render.shape == (3, 8, 8)
    # center cell of the object channel is 1 + noise, empty channel is noise
    assert abs(render[1, 4, 4] - 1.0) < 0.3
    assert abs(render[0, 4, 4]) < 0.3


def test_line_round_trip():
    spec, _ = make_scene(11, "eval", 5)
    line = scene_to_line(spec)
    back = scene_from_line(line)
    assert back == spec
    assert scene_to_line(back) == line


def test_line_rejects_garbage():
    with pytest.raises(ValueError):
        scene_from_line("16 16 0 0.5")


def test_save_load_scenes(tmp_path):
    specs = [make_scene(3, "eval", i)[0] for i in range(5)]
    path = tmp_path / "scenes.txt"
    save_scenes(path, specs)
    assert load_scenes(path) == specs


def test_eval_set_size_validated():
    with pytest.raises(ValueError):
        make_eval_set(0, 0)


# ---------------------------------------------------------------------------
# featurizer

def test_zero_render_gives_bias_rows():
    render = np.zeros((3, 8, 8))
    patches = patch_matrices(render)
    tape = Tape()
    rng = np.random.default_rng(0)
    leaves = {
        "featurizer.high.w": ops.constant(rng.normal(size=(27, 16))),
        "featurizer.low.w": ops.constant(rng.normal(size=(12, 16))),
    }
    from queryformer.tape import DualTensor
    leaves = {k: DualTensor(v.values) for k, v in leaves.items()}
    leaves["featurizer.high.b"] = DualTensor(rng.normal(size=16))
    leaves["featurizer.low.b"] = DualTensor(rng.normal(size=16))
    f_h, f_l = featurize(tape, leaves, patches)
    assert np.abs(f_h.values - leaves["featurizer.high.b"].values).max() < 1e-15
    assert np.abs(f_l.values - leaves["featurizer.low.b"].values).max() < 1e-15


def test_feature_grid_shapes():
    render = np.random.default_rng(1).uniform(size=(3, 16, 16))
    high, low = patch_matrices(render)
    assert high.shape == (256, 27)
    assert low.shape == (64, 12)
    assert patch_widths(3) == (27, 12)


def test_odd_grid_rejected():
    with pytest.raises(ShapeError):
        patch_matrices(np.zeros((2, 7, 8)))


def test_featurizer_fd():
    rng = np.random.default_rng(2)
    render = rng.uniform(size=(2, 4, 4))
    patches = patch_matrices(render)
    c_h = rng.normal(size=(16, 8))
    c_l = rng.normal(size=(4, 8))

    def build(tape, lv):
        f_h, f_l = featurize(tape, lv, patches)
        return ops.add(tape,
                       ops.sum_all(tape, ops.mul(tape, f_h, ops.constant(c_h))),
                       ops.sum_all(tape, ops.mul(tape, f_l, ops.constant(c_l))))

    arrays = {
        "featurizer.high.w": rng.normal(size=(18, 8)),
        "featurizer.high.b": rng.normal(size=8),
        "featurizer.low.w": rng.normal(size=(8, 8)),
        "featurizer.low.b": rng.normal(size=8),
    }
    assert grad_check(build, arrays, eps=1e-5).max_rel_err < 1e-4


def test_patch_content_matches_neighborhood():
    render = np.arange(32.0).reshape(2, 4, 4)
    high, low = patch_matrices(render)
    # cell (1, 2): 3x3 neighborhood rows 0..2, cols 1..3, channel-major
    expected = render[:, 0:3, 1:4].reshape(-1)
    assert np.array_equal(high[1 * 4 + 2], expected)
    # low-res cell (0, 1): block rows 0..1, cols 2..3
    expected_low = render[:, 0:2, 2:4].reshape(-1)
    assert np.array_equal(low[1], expected_low)


# ---------------------------------------------------------------------------
# toy AP

def perfect_logits(classes, num_classes, nq):
    logits = np.full((nq, num_classes), -20.0)
    for q, c in enumerate(classes):
        logits[q, c] = 20.0
    return logits


def test_perfect_detector_scores_one():
    scenes = [make_scene(5, "eval", i)[0] for i in range(10)]
    preds = []
    for spec in scenes:
        classes, boxes = spec.truth_arrays()
        logits = perfect_logits(classes, 3, 6)
        full_boxes = np.tile([0.5, 0.5, 0.2, 0.2], (6, 1))
        full_boxes[: len(classes)] = boxes
        preds.append((logits, full_boxes))
    mean_ap, per_class = toy_ap(preds, scenes, num_classes=3)
    assert mean_ap == 1.0
    assert all(v == 1.0 for v in per_class.values())


def test_hopeless_detector_scores_zero():
    scenes = [make_scene(6, "eval", i)[0] for i in range(10)]
    preds = []
    for spec in scenes:
        logits = np.full((4, 3), 3.0)
        boxes = np.tile([0.02, 0.02, 0.01, 0.01], (4, 1))  # never reaches 0.5 IoU
        preds.append((logits, boxes))
    mean_ap, _ = toy_ap(preds, scenes, num_classes=3)
    assert mean_ap == 0.0


def test_handmade_pr_curve():
    # One scene, two truths of class 0; three predictions ranked by score:
    #   rank 1 hits truth A, rank 2 misses, rank 3 hits truth B.
    # Precision at hits: 1/1 and 2/3; recall steps 1/2 then 1 ->
    # AP = 0.5 * 1 + 0.5 * 2/3.
    scene = SceneSpec(16, 16, [SceneObject(0, 0.25, 0.25, 0.2, 0.2),
                               SceneObject(0, 0.75, 0.75, 0.2, 0.2)])
    logits = np.array([[5.0], [4.0], [3.0]])
    boxes = np.array([
        [0.25, 0.25, 0.2, 0.2],   # hit A
        [0.5, 0.5, 0.05, 0.05],   # miss
        [0.75, 0.75, 0.2, 0.2],   # hit B
    ])
    mean_ap, per_class = toy_ap([(logits, boxes)], [scene], num_classes=1)
    expected = 0.5 * 1.0 + 0.5 * (2.0 / 3.0)
    assert abs(mean_ap - expected) < 1e-12


def test_empty_eval_rejected():
    with pytest.raises(ValueError, match="empty"):
        toy_ap([], [], num_classes=3)


def test_ap_deterministic_under_score_ties():
    scenes = [make_scene(8, "eval", i)[0] for i in range(4)]
    preds = [(np.zeros((5, 3)), np.tile([0.5, 0.5, 0.3, 0.3], (5, 1))) for _ in scenes]
    a, _ = toy_ap(preds, scenes, num_classes=3)
    b, _ = toy_ap(preds, scenes, num_classes=3)
    assert a == b
