"""Guided query position updates and the decoder layer step."""

import numpy as np
import pytest

from queryformer import ops
from queryformer.detect import DetectionHead, HeadConfig
from queryformer.featurize import patch_matrices
from queryformer.gqpos import (BoxMlp, decode_boxes, guide_query_position,
                               predict_positions)
from queryformer.gradcheck import grad_check
from queryformer.posenc import BoxEncodingConfig, encode_box
from queryformer.tape import DualTensor, Tape


def make_mlp(rng, d=8, zero=False):
    def mk(shape):
        return DualTensor(np.zeros(shape) if zero else rng.normal(size=shape) * 0.4)

    return BoxMlp(mk((d, d)), mk(d), mk((d, d)), mk(d), mk((d, 4)), mk(4))


def test_zero_mlp_gives_center_boxes():
    rng = np.random.default_rng(0)
    tape = Tape()
    boxes = predict_positions(tape, DualTensor(rng.normal(size=(3, 8))), make_mlp(rng, zero=True))
    assert np.array_equal(boxes.values, np.full((3, 4), 0.5))


def test_identical_queries_identical_boxes():
    rng = np.random.default_rng(1)
    mlp = make_mlp(rng)
    row = rng.normal(size=8)
    tape = Tape()
    boxes = predict_positions(tape, DualTensor(np.stack([row, row])), mlp)
    assert np.array_equal(boxes.values[0], boxes.values[1])
    assert boxes.values.min() > 0.0 and boxes.values.max() < 1.0


def test_predict_positions_fd():
    rng = np.random.default_rng(2)
    c = rng.normal(size=(2, 4))
    arrays = dict(q=rng.normal(size=(2, 8)),
                  w1=rng.normal(size=(8, 8)) * 0.4, b1=rng.normal(size=8),
                  w2=rng.normal(size=(8, 8)) * 0.4, b2=rng.normal(size=8),
                  w3=rng.normal(size=(8, 4)) * 0.4, b3=rng.normal(size=4))

    def build(tape, lv):
        mlp = BoxMlp(lv["w1"], lv["b1"], lv["w2"], lv["b2"], lv["w3"], lv["b3"])
        boxes = predict_positions(tape, lv["q"], mlp)
        return ops.sum_all(tape, ops.mul(tape, boxes, ops.constant(c)))

    assert grad_check(build, arrays, eps=1e-5).max_rel_err < 1e-4


def test_guide_identity_projection_recovers_encoding():
    rng = np.random.default_rng(3)
    boxes = rng.uniform(0.2, 0.8, size=(3, 4))
    cfg = BoxEncodingConfig(16)
    tape = Tape()
    out = guide_query_position(tape, DualTensor(boxes), cfg,
                               DualTensor(np.eye(16)), DualTensor(np.zeros(16)))
    expected = np.stack([encode_box(b, cfg) for b in boxes])
    assert np.abs(out.values - expected).max() < 1e-15


def test_equal_boxes_equal_query_positions():
    rng = np.random.default_rng(4)
    box = rng.uniform(0.3, 0.7, size=4)
    tape = Tape()
    out = guide_query_position(tape, DualTensor(np.stack([box, box])), BoxEncodingConfig(16),
                               DualTensor(rng.normal(size=(16, 8))), DualTensor(rng.normal(size=8)))
    assert np.array_equal(out.values[0], out.values[1])


def test_guide_composes_predict_and_encode():
    rng = np.random.default_rng(5)
    mlp = make_mlp(rng)
    proj_w = DualTensor(rng.normal(size=(16, 8)))
    proj_b = DualTensor(rng.normal(size=8))
    q = DualTensor(rng.normal(size=(3, 8)))
    tape = Tape()
    boxes = predict_positions(tape, q, mlp)
    guided = guide_query_position(tape, boxes, BoxEncodingConfig(16), proj_w, proj_b)
    cfg = BoxEncodingConfig(16)
    expected = np.stack([encode_box(b, cfg) for b in boxes.values]) @ proj_w.values + proj_b.values
    assert np.abs(guided.values - expected).max() < 1e-12


def test_guide_rejects_out_of_range_boxes():
    tape = Tape()
    with pytest.raises(ValueError):
        guide_query_position(tape, DualTensor(np.full((1, 4), 1.5)), BoxEncodingConfig(16),
                             DualTensor(np.eye(16)), DualTensor(np.zeros(16)))


def test_decode_boxes_uses_reference_offsets():
    rng = np.random.default_rng(6)
    mlp = make_mlp(rng, zero=True)
    ref = rng.uniform(0.2, 0.8, size=(3, 2))
    tape = Tape()
    boxes = decode_boxes(tape, DualTensor(rng.normal(size=(3, 8))), mlp, DualTensor(ref))
    # zero head: xy collapse to the references, extents to 0.5
    assert np.abs(boxes.values[:, :2] - ref).max() < 1e-9
    assert np.abs(boxes.values[:, 2:] - 0.5).max() < 1e-12


# ---------------------------------------------------------------------------
# decoder layer step via the assembled head

TINY = dict(num_queries=4, num_layers=2, d=8, heads=2, d_model=8, num_classes=2,
            grid_h=4, grid_w=4)


def tiny_head(mode="gqpos", seed=0, warm=False, **kw):
    cfg = HeadConfig(**{**TINY, **kw, "mode": mode})
    head = DetectionHead(cfg, seed=seed)
    if warm:
        # the final box layer is zero-initialized; give it deterministic
        # nonzero values so boxes actually move between layers
        rng = np.random.default_rng(99)
        for name in head.store.names():
            arr = head.store[name]
            if arr.size and np.all(arr == 0):
                head.store[name] = rng.normal(size=arr.shape) * 0.3
    return head


def tiny_render(seed=0):
    return np.random.default_rng(seed).uniform(size=(2, 4, 4))


def test_fixed_mode_reuses_query_pos_object():
    head = tiny_head("fixed")
    res = head.predict(tiny_render(), trace=True)
    q_pos_tensors = [s.q_pos for s in res.states]
    assert all(t is q_pos_tensors[0] for t in q_pos_tensors)
    assert all(np.array_equal(t.values, q_pos_tensors[0].values) for t in q_pos_tensors)


def test_gqpos_with_frozen_boxes_equals_parallel():
    # Layer-0 guided positions reused everywhere is exactly the parallel mode.
    head_p = tiny_head("parallel", num_layers=3, warm=True)
    res_p = head_p.predict(tiny_render(), trace=True)
    head_g = tiny_head("gqpos", num_layers=3, warm=True)
    assert head_g.store.names() == head_p.store.names()
    res_g = head_g.predict(tiny_render(), trace=True)
    # identical parameters by name-seeded init
    assert np.array_equal(res_p.states[1].q_pos.values, res_g.states[1].q_pos.values)
    # layer>=1 parallel keeps the layer-1 q_pos; gqpos re-guides
    assert np.array_equal(res_p.states[2].q_pos.values, res_p.states[1].q_pos.values)
    assert not np.array_equal(res_g.states[2].q_pos.values, res_g.states[1].q_pos.values)


def test_gqpos_query_pos_recomputable_from_stored_state():
    head = tiny_head("gqpos", num_layers=3)
    res = head.predict(tiny_render(), trace=True)
    leaves = head.store.leaves()
    for layer, out in enumerate(res.layers):
        tape = Tape()
        mlp = BoxMlp(*(leaves[f"head.box{i}.{p}"] for i in (1, 2, 3) for p in ("w", "b")))
        ref = DualTensor(out.trace["ref_in"])
        boxes = decode_boxes(tape, DualTensor(out.trace["q_content_out"]), mlp, ref)
        guided = guide_query_position(tape, boxes, BoxEncodingConfig(head.cfg.d_model),
                                      leaves["guide.proj.w"], leaves["guide.proj.b"])
        assert np.abs(guided.values - out.trace["next_q_pos"]).max() < 1e-12


def test_no_fc_requires_matching_widths():
    with pytest.raises(ValueError, match="no_fc"):
        tiny_head("no_fc", d_model=16)


def test_no_fc_uses_encoding_directly():
    head = tiny_head("no_fc")
    res = head.predict(tiny_render(), trace=True)
    out = res.layers[0]
    tape = Tape()
    enc = ops.box_encoding(tape, DualTensor(out.trace["boxes"]), head.cfg.d_model)
    assert np.array_equal(enc.values, out.trace["next_q_pos"])


def test_no_pe_lifts_boxes_linearly():
    head = tiny_head("no_pe")
    res = head.predict(tiny_render(), trace=True)
    out = res.layers[0]
    lift_w = head.store["guide.lift.w"]
    lift_b = head.store["guide.lift.b"]
    expected = out.trace["boxes"] @ lift_w + lift_b
    assert np.abs(expected - out.trace["next_q_pos"]).max() < 1e-12


def test_boxes_already_sigmoid_clamped():
    head = tiny_head("gqpos")
    res = head.predict(tiny_render())
    boxes = res.boxes()
    assert np.array_equal(np.clip(boxes, 0.0, 1.0), boxes)
    assert boxes.min() > 0.0 and boxes.max() < 1.0


def test_end_to_end_fd_two_layers():
    # Full 2-layer guided decoder against finite differences, every
    # parameter probed (subsampled for the big ones).
    head = tiny_head("gqpos", num_layers=2)
    render = tiny_render(1)
    patches = patch_matrices(render)
    rng = np.random.default_rng(7)
    arrays = {n: head.store[n].copy() for n in head.store.names()}
    for n in arrays:  # randomize zero-initialized tails so gradients flow
        if arrays[n].size and np.all(arrays[n] == 0):
            arrays[n] = rng.normal(size=arrays[n].shape) * 0.2
    c_cls = rng.normal(size=(4, 2))
    c_box = rng.normal(size=(4, 4))

    def build(tape, lv):
        result = head.forward(tape, lv, patches)
        score = ops.add(
            tape,
            ops.sum_all(tape, ops.mul(tape, result.layers[-1].cls, ops.constant(c_cls))),
            ops.sum_all(tape, ops.mul(tape, result.layers[-1].boxes, ops.constant(c_box))))
        return score

    report = grad_check(build, arrays, eps=1e-5, max_entries=6, rng=np.random.default_rng(8))
    assert report.max_rel_err < 1e-4, str(report.per_param)
