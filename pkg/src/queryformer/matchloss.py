"""Set matching costs and the composite detection loss.

Every decoder layer's predictions are matched one-to-one to the ground
truth by minimum cost (focal-style class cost + L1 box distance +
(1 - GIoU)), then charged a weighted sum of focal classification loss over
all queries (unmatched queries target all-zero scores), L1 distance and
GIoU loss over the matched pairs.  Per-layer terms are normalized by the
number of truths; the total is the mean over layers.

Boxes everywhere are (x, y, h, w): center, height, width, with y/h on the
vertical axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .hungarian import MatchAssignment, hungarian_match
from .tape import DualTensor, Tape


@dataclass
class CostWeights:
    """Matching-cost weights (w_*), loss weights (l_*) and focal shape."""

    w_class: float = 2.0
    w_l1: float = 5.0
    w_giou: float = 2.0
    l_class: float = 2.0
    l_l1: float = 5.0
    l_giou: float = 2.0
    alpha: float = 0.25
    gamma: float = 2.0

    def validate(self) -> None:
        for name in ("w_class", "w_l1", "w_giou", "l_class", "l_l1", "l_giou", "alpha", "gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


# ---------------------------------------------------------------------------
# plain-array geometry

def _corners(boxes: np.ndarray) -> tuple:
    x, y, h, w = boxes[..., 0], boxes[..., 1], boxes[..., 2], boxes[..., 3]
    return x - w / 2, x + w / 2, y - h / 2, y + h / 2


def giou(a, b) -> float:
    """Generalized IoU of two (x, y, h, w) boxes, in (-1, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != (4,) or b.shape != (4,):
        raise ValueError(f"boxes must have 4 coordinates, got {a.shape} and {b.shape}")
    if a[2] <= 0 or a[3] <= 0 or b[2] <= 0 or b[3] <= 0:
        raise ValueError(f"boxes must have positive extents, got {a} and {b}")
    return float(giou_matrix(a[None, :], b[None, :])[0, 0])


def giou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(n, m) pairwise GIoU between box rows."""
    ax1, ax2, ay1, ay2 = _corners(a)
    bx1, bx2, by1, by2 = _corners(b)
    iw = np.maximum(np.minimum(ax2[:, None], bx2[None, :]) - np.maximum(ax1[:, None], bx1[None, :]), 0.0)
    ih = np.maximum(np.minimum(ay2[:, None], by2[None, :]) - np.maximum(ay1[:, None], by1[None, :]), 0.0)
    inter = iw * ih
    area_a = (a[:, 2] * a[:, 3])[:, None]
    area_b = (b[:, 2] * b[:, 3])[None, :]
    union = area_a + area_b - inter
    ew = np.maximum(ax2[:, None], bx2[None, :]) - np.minimum(ax1[:, None], bx1[None, :])
    eh = np.maximum(ay2[:, None], by2[None, :]) - np.minimum(ay1[:, None], by1[None, :])
    enclose = ew * eh
    return inter / union - (enclose - union) / enclose


def _log_sigmoid(x: np.ndarray) -> np.ndarray:
    return -np.logaddexp(0.0, -x)


def focal_class_cost(class_logits: np.ndarray, truth_classes: np.ndarray,
                     alpha: float, gamma: float) -> np.ndarray:
    """(q, g) matching cost: positive focal term minus negative focal term
    for each query scored against each truth's class."""
    p = 1.0 / (1.0 + np.exp(-class_logits))
    pos = alpha * (1.0 - p) ** gamma * (-_log_sigmoid(class_logits))
    neg = (1.0 - alpha) * p ** gamma * (-_log_sigmoid(-class_logits))
    return pos[:, truth_classes] - neg[:, truth_classes]


def build_cost_matrix(class_logits: np.ndarray, boxes: np.ndarray,
                      truth_classes: np.ndarray, truth_boxes: np.ndarray,
                      weights: CostWeights) -> np.ndarray:
    """(g, q) matching cost with the (focal, L1, 1 - GIoU) mix."""
    c_class = focal_class_cost(class_logits, truth_classes, weights.alpha, weights.gamma)
    c_l1 = np.abs(boxes[:, None, :] - truth_boxes[None, :, :]).sum(axis=2)
    c_giou = 1.0 - giou_matrix(boxes, truth_boxes)
    cost = weights.w_class * c_class + weights.w_l1 * c_l1 + weights.w_giou * c_giou
    return np.ascontiguousarray(cost.T)


def validate_truth(truth_classes: np.ndarray, truth_boxes: np.ndarray, num_classes: int) -> None:
    if truth_boxes.ndim != 2 or truth_boxes.shape[1] != 4:
        raise ValueError(f"truth boxes must be (g, 4), got {truth_boxes.shape}")
    if truth_classes.shape != (truth_boxes.shape[0],):
        raise ValueError("truth classes and boxes disagree on count")
    if truth_boxes.shape[0] < 1:
        raise ValueError("at least one truth object required")
    if np.any(truth_boxes[:, 2] <= 0) or np.any(truth_boxes[:, 3] <= 0):
        raise ValueError("degenerate truth box: height and width must be positive")
    if np.any(truth_classes < 0) or np.any(truth_classes >= num_classes):
        raise ValueError(f"truth class out of range [0, {num_classes})")


# ---------------------------------------------------------------------------
# tape-side loss terms

def _col(tape: Tape, x: DualTensor, j: int) -> DualTensor:
    return ops.slice_cols(tape, x, j, j + 1)


def _giou_columns(tape: Tape, pred: DualTensor, truth: DualTensor) -> DualTensor:
    """(g, 1) GIoU of row-aligned box tensors, differentiable in both."""
    def corners(t):
        x, y, h, w = (_col(tape, t, j) for j in range(4))
        hw = ops.scale(tape, w, 0.5)
        hh = ops.scale(tape, h, 0.5)
        return (ops.sub(tape, x, hw), ops.add(tape, x, hw),
                ops.sub(tape, y, hh), ops.add(tape, y, hh), h, w)

    px1, px2, py1, py2, ph, pw = corners(pred)
    tx1, tx2, ty1, ty2, th, tw = corners(truth)
    iw = ops.relu(tape, ops.sub(tape, ops.minimum(tape, px2, tx2), ops.maximum(tape, px1, tx1)))
    ih = ops.relu(tape, ops.sub(tape, ops.minimum(tape, py2, ty2), ops.maximum(tape, py1, ty1)))
    inter = ops.mul(tape, iw, ih)
    union = ops.sub(tape, ops.add(tape, ops.mul(tape, ph, pw), ops.mul(tape, th, tw)), inter)
    iou = ops.div(tape, inter, union)
    ew = ops.sub(tape, ops.maximum(tape, px2, tx2), ops.minimum(tape, px1, tx1))
    eh = ops.sub(tape, ops.maximum(tape, py2, ty2), ops.minimum(tape, py1, ty1))
    enclose = ops.mul(tape, ew, eh)
    return ops.sub(tape, iou, ops.div(tape, ops.sub(tape, enclose, union), enclose))


def _focal_sum(tape: Tape, logits: DualTensor, targets: np.ndarray,
               alpha: float, gamma: float) -> DualTensor:
    """Sigmoid focal loss summed over all (query, class) slots."""
    p = ops.sigmoid(tape, logits)
    one_minus_p = ops.sigmoid(tape, ops.scale(tape, logits, -1.0))
    log_p = ops.scale(tape, ops.softplus(tape, ops.scale(tape, logits, -1.0)), -1.0)
    log_1mp = ops.scale(tape, ops.softplus(tape, logits), -1.0)
    pos = ops.mul(tape, ops.powc(tape, one_minus_p, gamma), log_p)
    neg = ops.mul(tape, ops.powc(tape, p, gamma), log_1mp)
    t = ops.constant(targets)
    not_t = ops.constant(1.0 - targets)
    s_pos = ops.sum_all(tape, ops.mul(tape, t, pos))
    s_neg = ops.sum_all(tape, ops.mul(tape, not_t, neg))
    return ops.add(tape, ops.scale(tape, s_pos, -alpha), ops.scale(tape, s_neg, -(1.0 - alpha)))


def match_layer(class_logits: np.ndarray, boxes: np.ndarray, truth_classes: np.ndarray,
                truth_boxes: np.ndarray, weights: CostWeights) -> MatchAssignment:
    cost = build_cost_matrix(class_logits, boxes, truth_classes, truth_boxes, weights)
    return hungarian_match(cost)


def detection_loss(tape: Tape, layer_outputs: list, truth_classes, truth_boxes,
                   weights: CostWeights, num_classes: int, aux_loss: bool = True):
    """Match and score every decoder layer.  Returns (total DualTensor,
    breakdown dict); breakdown terms are loss-weighted and satisfy
    loss_total = loss_class + loss_l1 + loss_giou = mean(per_layer)."""
    weights.validate()
    truth_classes = np.asarray(truth_classes, dtype=np.intp)
    truth_boxes = np.asarray(truth_boxes, dtype=np.float64)
    validate_truth(truth_classes, truth_boxes, num_classes)
    g = truth_boxes.shape[0]

    scored = layer_outputs if aux_loss else layer_outputs[-1:]
    layer_totals = []
    sums = {"class": 0.0, "l1": 0.0, "giou": 0.0}
    per_layer = []
    for out in scored:
        assign = match_layer(out.cls.values, out.boxes.values, truth_classes, truth_boxes, weights)
        targets = np.zeros(out.cls.shape)
        targets[assign.truth_to_query, truth_classes] = 1.0

        class_term = ops.scale(tape, _focal_sum(tape, out.cls, targets, weights.alpha, weights.gamma),
                               weights.l_class / g)
        matched = ops.gather_rows(tape, out.boxes, assign.truth_to_query)
        truth_t = ops.constant(truth_boxes)
        l1_term = ops.scale(tape, ops.sum_all(tape, ops.absval(tape, ops.sub(tape, matched, truth_t))),
                            weights.l_l1 / g)
        giou_vals = _giou_columns(tape, matched, truth_t)
        ones = ops.constant(np.ones_like(giou_vals.values))
        giou_term = ops.scale(tape, ops.sum_all(tape, ops.sub(tape, ones, giou_vals)),
                              weights.l_giou / g)

        layer_total = ops.add(tape, ops.add(tape, class_term, l1_term), giou_term)
        layer_totals.append(layer_total)
        sums["class"] += float(class_term.values[0, 0])
        sums["l1"] += float(l1_term.values[0, 0])
        sums["giou"] += float(giou_term.values[0, 0])
        per_layer.append(float(layer_total.values[0, 0]))

    acc = layer_totals[0]
    for t in layer_totals[1:]:
        acc = ops.add(tape, acc, t)
    total = ops.scale(tape, acc, 1.0 / len(layer_totals))
    n = len(layer_totals)
    breakdown = {
        "loss_total": float(total.values[0, 0]),
        "loss_class": sums["class"] / n,
        "loss_l1": sums["l1"] / n,
        "loss_giou": sums["giou"] / n,
        "per_layer_losses": per_layer,
    }
    return total, breakdown
