"""Training loop determinism, divergence handling and the optimization
sanity trend."""

import json
import os
import pathlib

import numpy as np
import pytest

from queryformer import kernels
from queryformer.detect import DetectionHead, HeadConfig
from queryformer.matchloss import CostWeights
from queryformer.train import AdamW, TrainConfig, TrainDiverged, evaluate_ap, train

TINY = dict(num_queries=4, num_layers=2, d=8, heads=2, d_model=8, num_classes=2,
            grid_h=4, grid_w=4)

FIXTURE = pathlib.Path(__file__).resolve().parent.parent / "fixtures" / "reference_baseline.json"


def tiny_head(seed=0, **kw):
    return DetectionHead(HeadConfig(**{**TINY, **kw}), seed=seed)


def test_zero_steps_rejected():
    with pytest.raises(ValueError, match="steps"):
        TrainConfig(steps=0).validate()
    with pytest.raises(ValueError, match="lr"):
        TrainConfig(lr=0.0).validate()


def test_single_step_emits_single_record():
    history = train(tiny_head(), TrainConfig(steps=1, batch_size=2, seed=0))
    assert len(history) == 1
    rec = history[0]
    assert set(rec) == {"step", "lr", "loss_total", "loss_class", "loss_l1", "loss_giou",
                        "per_layer_losses"}
    assert rec["step"] == 0 and len(rec["per_layer_losses"]) == 2


def test_same_seed_identical_metric_streams():
    h1 = train(tiny_head(), TrainConfig(steps=6, batch_size=2, seed=3))
    h2 = train(tiny_head(), TrainConfig(steps=6, batch_size=2, seed=3))
    assert h1 == h2


def test_different_seed_differs():
    h1 = train(tiny_head(seed=0), TrainConfig(steps=3, batch_size=2, seed=0))
    h2 = train(tiny_head(seed=0), TrainConfig(steps=3, batch_size=2, seed=4))
    assert h1 != h2


def test_lr_drop_schedule():
    history = train(tiny_head(), TrainConfig(steps=10, lr=1e-3, lr_drop_step=7, batch_size=1, seed=0))
    lrs = [r["lr"] for r in history]
    assert lrs[:7] == [1e-3] * 7
    assert np.allclose(lrs[7:], 1e-4)


def test_lr_drop_defaults_to_80_percent():
    assert TrainConfig(steps=3000).effective_drop_step() == 2400


def test_checkpoint_callback_fires_at_drop():
    tags = []
    train(tiny_head(), TrainConfig(steps=6, lr_drop_step=4, batch_size=1, seed=0),
          checkpoint_cb=tags.append)
    assert tags == ["lrdrop"]


def test_divergence_aborts_with_partial_history(monkeypatch):
    import queryformer.train as train_mod

    real_loss = train_mod.detection_loss
    calls = {"n": 0}

    def exploding(tape, layers, classes, boxes, weights, num_classes, aux_loss=True):
        total, breakdown = real_loss(tape, layers, classes, boxes, weights, num_classes, aux_loss)
        calls["n"] += 1
        if calls["n"] > 4:
            breakdown = dict(breakdown, loss_total=float("nan"))
        return total, breakdown

    monkeypatch.setattr(train_mod, "detection_loss", exploding)
    with pytest.raises(TrainDiverged) as info:
        train(tiny_head(), TrainConfig(steps=50, batch_size=2, seed=0))
    assert len(info.value.history) == info.value.step
    assert info.value.step >= 1


def test_thread_count_env(monkeypatch):
    from queryformer.train import thread_count

    monkeypatch.setenv("QF_THREADS", "3")
    assert thread_count() == 3
    monkeypatch.setenv("QF_THREADS", "junk")
    with pytest.raises(ValueError, match="QF_THREADS"):
        thread_count()


def test_threaded_batches_match_serial(monkeypatch):
    monkeypatch.setenv("QF_THREADS", "2")
    h2 = train(tiny_head(), TrainConfig(steps=4, batch_size=3, seed=1))
    monkeypatch.setenv("QF_THREADS", "1")
    h1 = train(tiny_head(), TrainConfig(steps=4, batch_size=3, seed=1))
    assert h1 == h2


def test_adamw_moves_parameters_deterministically():
    head_a, head_b = tiny_head(), tiny_head()
    cfg = TrainConfig(steps=1)
    opt_a, opt_b = AdamW(head_a.store, cfg), AdamW(head_b.store, cfg)
    grads = {n: np.ones_like(head_a.store[n]) for n in head_a.store.names()}
    opt_a.step({n: g.copy() for n, g in grads.items()}, 1e-3)
    opt_b.step({n: g.copy() for n, g in grads.items()}, 1e-3)
    for n in head_a.store.names():
        assert np.array_equal(head_a.store[n], head_b.store[n])
    # weight decay shrinks a zero-gradient parameter toward zero
    head_c = tiny_head()
    before = head_c.store["query.content"].copy()
    opt_c = AdamW(head_c.store, TrainConfig(weight_decay=0.1))
    zero_grads = {n: np.zeros_like(head_c.store[n]) for n in head_c.store.names()}
    opt_c.step(zero_grads, 1e-2)
    after = head_c.store["query.content"]
    assert np.abs(after).sum() < np.abs(before).sum()


def test_evaluate_ap_runs_on_heldout_scenes():
    head = tiny_head()
    mean_ap, per_class = evaluate_ap(head, eval_seed=5, count=8)
    assert 0.0 <= mean_ap <= 1.0
    assert set(per_class) <= {0, 1}


@pytest.mark.slow
def test_baseline_training_descends_below_step100():
    # Single-scale fixed-mode baseline, 2000 steps: the total loss must end
    # below its step-100 value; the reference numbers live in the fixtures
    # file for cross-checking.
    cfg = HeadConfig(mode="fixed")
    head = DetectionHead(cfg, seed=0)
    history = train(head, TrainConfig(steps=2000, seed=0), CostWeights())
    step100 = history[100]["loss_total"]
    final = history[-1]["loss_total"]
    assert final < step100, f"final {final} !< step-100 {step100}"
    if FIXTURE.exists():
        ref = json.loads(FIXTURE.read_text())
        if ref.get("backend") == kernels.get().NAME:
            assert abs(step100 - ref["step100_loss"]) / ref["step100_loss"] < 0.2
            assert final < ref["step100_loss"]
