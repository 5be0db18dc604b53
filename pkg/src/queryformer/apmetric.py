"""Toy average precision on synthetic scenes.

Per class: every query of every scene is a candidate scored by that
class's sigmoid probability; candidates are swept in descending score
(ties broken by scene then query index) and greedily matched to the
unmatched truth of that class with the highest IoU at or above the
threshold.  AP is the area under the interpolated precision envelope;
the reported value is the mean over classes that have ground truth.
"""

from __future__ import annotations

import numpy as np

from .matchloss import giou_matrix


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    from .matchloss import _corners

    ax1, ax2, ay1, ay2 = _corners(a)
    bx1, bx2, by1, by2 = _corners(b)
    iw = np.maximum(np.minimum(ax2[:, None], bx2[None, :]) - np.maximum(ax1[:, None], bx1[None, :]), 0.0)
    ih = np.maximum(np.minimum(ay2[:, None], by2[None, :]) - np.maximum(ay1[:, None], by1[None, :]), 0.0)
    inter = iw * ih
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None, :] - inter
    return inter / union


def _average_precision(tp: np.ndarray, n_truth: int) -> float:
    """Area under the all-point interpolated PR curve; tp is the sorted
    hit/miss sequence."""
    cum_tp = np.cumsum(tp)
    ranks = np.arange(1, len(tp) + 1)
    precision = cum_tp / ranks
    recall = cum_tp / n_truth
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev_r = 0.0
    ap = 0.0
    for p, r in zip(envelope, recall):
        if r > prev_r:
            ap += (r - prev_r) * p
            prev_r = r
    return float(ap)


def toy_ap(predictions: list, scenes: list, num_classes: int, iou_threshold: float = 0.5):
    """Mean AP over classes.

    predictions: per scene a (class_logits (nq, C), boxes (nq, 4)) pair for
    the final decoder layer; scenes: matching list of SceneSpec.
    Returns (mean_ap, per_class dict).
    """
    if len(predictions) == 0 or len(scenes) == 0:
        raise ValueError("toy_ap: empty evaluation set")
    if len(predictions) != len(scenes):
        raise ValueError(f"toy_ap: {len(predictions)} predictions vs {len(scenes)} scenes")

    truth = []
    for spec in scenes:
        classes, boxes = spec.truth_arrays()
        truth.append((classes, boxes))

    per_class = {}
    for c in range(num_classes):
        n_truth = sum(int((classes == c).sum()) for classes, _ in truth)
        if n_truth == 0:
            continue
        scores = []
        keys_scene = []
        keys_query = []
        for s, (logits, _) in enumerate(predictions):
            p = 1.0 / (1.0 + np.exp(-logits[:, c]))
            scores.extend(p.tolist())
            keys_scene.extend([s] * logits.shape[0])
            keys_query.extend(range(logits.shape[0]))
        scores = np.asarray(scores)
        order = np.lexsort((np.asarray(keys_query), np.asarray(keys_scene), -scores))

        matched = [np.zeros(len(classes), dtype=bool) for classes, _ in truth]
        tp = np.zeros(len(order))
        for rank, oi in enumerate(order):
            s = keys_scene[oi]
            q = keys_query[oi]
            classes, boxes = truth[s]
            cand = np.flatnonzero((classes == c) & ~matched[s])
            if cand.size == 0:
                continue
            ious = iou_matrix(predictions[s][1][q : q + 1], boxes[cand])[0]
            best = int(np.argmax(ious))
            if ious[best] >= iou_threshold:
                matched[s][cand[best]] = True
                tp[rank] = 1.0
        per_class[c] = _average_precision(tp, n_truth)

    if not per_class:
        raise ValueError("toy_ap: no ground-truth objects in the evaluation set")
    mean_ap = float(np.mean(list(per_class.values())))
    return mean_ap, per_class
