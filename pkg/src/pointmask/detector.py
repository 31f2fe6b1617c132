"""Dense one-stage detection: losses, anchor matching, and box extraction.

The layout convention for flattened per-level outputs is level-major,
then row-major grid cell, then anchor index; record indices always refer
to that order so the mask stage can find its point again.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry as G
from . import tensor as T
from .tensor import Tensor, record_op


@dataclass
class Detection:
    level: int
    stride: int
    iy: int
    ix: int
    anchor: int
    box: np.ndarray          # decoded (x1, y1, x2, y2)
    score: float
    cls: int


def focal_loss(logits: Tensor, targets: np.ndarray, include: np.ndarray | None = None,
               alpha: float = 0.25, gamma: float = 2.0, normalizer: float | None = None) -> Tensor:
    """Sigmoid focal loss over per-anchor multi-label targets.

    `targets` is {0,1} with the same shape as `logits`; `include` masks
    out ignored anchors (rows). Normalized by the positive count unless
    an explicit normalizer is given; at gamma=0, alpha=0.5 this is half
    the plain binary cross-entropy.
    """
    dt = logits.data.dtype
    targets = np.asarray(targets, dtype=dt)
    if targets.shape != logits.shape:
        raise T.TensorError("focal_loss: target shape mismatch")
    if include is None:
        inc = np.ones(logits.shape, dtype=dt)
    else:
        inc = np.broadcast_to(np.asarray(include, dtype=dt).reshape(-1, *([1] * (logits.data.ndim - 1))),
                              logits.shape).astype(dt)
    if normalizer is None:
        normalizer = max(1.0, float((targets * inc).sum()))
    norm = dt.type(normalizer)

    x = logits.data
    ce = np.maximum(x, 0) - x * targets + np.log1p(np.exp(-np.abs(x)))
    p_t = np.exp(-ce)
    alpha_t = alpha * targets + (1 - alpha) * (1 - targets)
    focal_w = alpha_t * (1 - p_t) ** gamma
    out = np.asarray((inc * focal_w * ce).sum() / norm, dtype=dt)

    def bwd(g):
        if logits.requires_grad:
            sig = 1.0 / (1.0 + np.exp(-np.abs(x)))
            sig = np.where(x >= 0, sig, 1 - sig)
            dce = sig - targets
            if gamma > 0:
                inner = gamma * (1 - p_t) ** (gamma - 1) * p_t * ce + (1 - p_t) ** gamma
            else:
                inner = np.ones_like(ce)
            logits.accumulate_grad(g * inc * alpha_t * inner * dce / norm)

    return record_op("focal_loss", (logits,), out, bwd)


def smooth_l1_loss(pred: Tensor, target: np.ndarray, positive: np.ndarray,
                   beta: float = 1.0, normalizer: float | None = None) -> Tensor:
    """Smooth-L1 over positive rows, summed then divided by the positive count."""
    dt = pred.data.dtype
    target = np.asarray(target, dtype=dt)
    if target.shape != pred.shape:
        raise T.TensorError("smooth_l1_loss: target shape mismatch")
    pos = np.asarray(positive, dtype=bool)
    npos = int(pos.sum())
    if normalizer is None:
        normalizer = max(1, npos)
    d = pred.data - target
    absd = np.abs(d)
    elem = np.where(absd < beta, 0.5 * d * d / beta, absd - 0.5 * beta)
    mask = pos.reshape(-1, *([1] * (pred.data.ndim - 1))).astype(dt)
    out = np.asarray((elem * mask).sum() / normalizer, dtype=dt)

    def bwd(g):
        if pred.requires_grad:
            delem = np.where(absd < beta, d / beta, np.sign(d))
            pred.accumulate_grad(g * delem * mask / dt.type(normalizer))

    return record_op("smooth_l1", (pred,), out, bwd)


def smooth_l1_elem(diff: float, beta: float = 1.0) -> float:
    """Per-coordinate smooth-L1 value (reference form used in tests)."""
    a = abs(diff)
    return 0.5 * a * a / beta if a < beta else a - 0.5 * beta


def prior_bias(pi: float = 0.01) -> float:
    """Classification bias init putting initial scores near the prior pi."""
    return -float(np.log((1 - pi) / pi))


@dataclass
class MatchResult:
    cls_targets: np.ndarray    # (M, Ccls) in {0,1}
    include: np.ndarray        # (M,) bool, False for ignored anchors
    positive: np.ndarray       # (M,) bool
    matched_gt: np.ndarray     # (M,) int, -1 when unmatched
    reg_targets: np.ndarray    # (M, 4)


def match_anchors(anchors: np.ndarray, gt_boxes: np.ndarray, gt_classes: np.ndarray,
                  num_classes: int, variant: str, strides: np.ndarray,
                  pos_iou: float = 0.5, neg_iou: float = 0.4,
                  force_match: bool = True) -> MatchResult:
    """RetinaNet-style assignment over flattened anchors.

    IoU >= pos_iou is positive, < neg_iou negative, in between ignored.
    With force_match, the best anchor of every ground truth is positive
    so small objects always train the regression head.
    """
    m = anchors.shape[0]
    cls_targets = np.zeros((m, num_classes), dtype=np.float64)
    include = np.ones(m, dtype=bool)
    positive = np.zeros(m, dtype=bool)
    matched = np.full(m, -1, dtype=np.int64)
    reg_targets = np.zeros((m, 4), dtype=np.float64)
    if len(gt_boxes) == 0:
        return MatchResult(cls_targets, include, positive, matched, reg_targets)

    ious = G.iou_matrix(anchors, gt_boxes)
    best_gt = ious.argmax(axis=1)
    best_iou = ious[np.arange(m), best_gt]
    positive = best_iou >= pos_iou
    include = ~((best_iou >= neg_iou) & (best_iou < pos_iou))
    matched[positive] = best_gt[positive]
    if force_match:
        for gi in range(len(gt_boxes)):
            ai = int(ious[:, gi].argmax())
            positive[ai] = True
            include[ai] = True
            matched[ai] = gi
    pos_idx = np.nonzero(positive)[0]
    cls_targets[pos_idx, gt_classes[matched[pos_idx]]] = 1.0
    for ai in pos_idx:
        reg_targets[ai] = G.encode_box(anchors[ai], gt_boxes[matched[ai]], variant,
                                       stride=float(strides[ai]))
    return MatchResult(cls_targets, include, positive, matched, reg_targets)


def detect(cls_scores: list[np.ndarray], reg_outputs: list[np.ndarray],
           anchor_arrays: list[np.ndarray], strides: list[int], variant: str,
           score_threshold: float = 0.05, nms_iou: float = 0.5,
           pre_nms_topk: int = 400, max_detections: int = 100) -> list[Detection]:
    """Score -> top-k -> per-class greedy NMS -> at most `max_detections`.

    `cls_scores` holds per-level sigmoid scores shaped (H, W, A, Ccls);
    `reg_outputs` per-level regressions shaped (H, W, A, 4).
    """
    rows = []  # (score, order_index, level, iy, ix, a, cls, box)
    order = 0
    for lvl, (scores, regs, anchors) in enumerate(zip(cls_scores, reg_outputs, anchor_arrays)):
        h, w, a, ccls = scores.shape
        hit = np.argwhere(scores > score_threshold)
        for iy, ix, ai, ci in hit:
            box = G.decode_box_safe(anchors[iy, ix, ai], regs[iy, ix, ai], variant,
                                    stride=float(strides[lvl]))
            if box is None:
                continue
            rows.append((float(scores[iy, ix, ai, ci]), order, lvl, int(iy), int(ix),
                         int(ai), int(ci), box))
            order += 1
    rows.sort(key=lambda r: (-r[0], r[1]))
    rows = rows[:pre_nms_topk]
    if not rows:
        return []

    kept: list[Detection] = []
    for ci in sorted({r[6] for r in rows}):
        cls_rows = [r for r in rows if r[6] == ci]
        boxes = np.array([r[7] for r in cls_rows])
        scores = np.array([r[0] for r in cls_rows])
        for idx in G.nms(boxes, scores, iou_threshold=nms_iou):
            r = cls_rows[idx]
            kept.append(Detection(level=r[2], stride=strides[r[2]], iy=r[3], ix=r[4],
                                  anchor=r[5], box=r[7], score=r[0], cls=r[6]))
    kept.sort(key=lambda d: -d.score)
    return kept[:max_detections]
