"""Positive-point selection and per-point training inputs for the mask stage.

A point is positive when its anchor or its currently regressed box
overlaps a ground truth above the IoU threshold; each sampled record
carries a target box drawn by type ratio (anchor / gt / regressed), the
indicator built against that target, and a bilinear ground-truth mask
crop spanning it.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry as G
from .config import SamplerConfig
from .geometry import Box
from .maskgen import bilinear_sample_image
from .tensor import Tensor, record_op

TARGET_TYPES = ("anchor", "gt", "regressed")


@dataclass
class Candidate:
    level: int
    iy: int
    ix: int
    anchor: int
    gt: int


@dataclass
class SampleRecord:
    level: int
    stride: int
    iy: int
    ix: int
    anchor: int
    gt: int
    target_type: str
    target_box: Box
    indicator: np.ndarray
    mask_target: np.ndarray     # (2K, 2K) in [0, 1]


def find_positive_candidates(anchor_arrays: list[np.ndarray],
                             regressed_arrays: list[np.ndarray | None],
                             gt_boxes: np.ndarray,
                             cfg: SamplerConfig) -> list[Candidate]:
    """Every (level, location, anchor, gt) passing the IoU criterion.

    The anchor-side and regressed-side conditions combine with OR by
    default; "and" requires both. Emission order is level-major then
    row-major cell, anchor, gt, which keeps sampling deterministic.
    """
    if len(gt_boxes) == 0:
        return []
    out: list[Candidate] = []
    for lvl, anchors in enumerate(anchor_arrays):
        h, w, a, _ = anchors.shape
        flat = anchors.reshape(-1, 4)
        iou_a = G.iou_matrix(flat, gt_boxes)
        hit_a = iou_a > cfg.iou_anchor
        regs = regressed_arrays[lvl]
        if regs is not None:
            iou_r = G.iou_matrix(regs.reshape(-1, 4), gt_boxes)
            hit_r = iou_r > cfg.iou_box
        else:
            hit_r = np.zeros_like(hit_a)
        hit = (hit_a | hit_r) if cfg.criterion == "or" else (hit_a & hit_r)
        for idx, gi in np.argwhere(hit):
            iy, rem = divmod(int(idx), w * a)
            ix, ai = divmod(rem, a)
            out.append(Candidate(level=lvl, iy=iy, ix=ix, anchor=ai, gt=int(gi)))
    return out


def _regressed_box(regressed_arrays, cand: Candidate, image_size: int) -> Box | None:
    regs = regressed_arrays[cand.level]
    if regs is None:
        return None
    arr = regs[cand.iy, cand.ix, cand.anchor]
    if not np.all(np.isfinite(arr)):
        return None
    x1, y1, x2, y2 = arr
    if x2 - x1 < 2 or y2 - y1 < 2:
        return None
    if x2 - x1 > 2 * image_size or y2 - y1 > 2 * image_size:
        return None
    return Box(float(x1), float(y1), float(x2), float(y2))


def sample_training_points(candidates: list[Candidate],
                           anchor_arrays: list[np.ndarray],
                           regressed_arrays: list[np.ndarray | None],
                           gt_boxes: np.ndarray, gt_masks: np.ndarray,
                           strides: list[int], variant: str, out_res: int,
                           cfg: SamplerConfig, rng: np.random.Generator,
                           image_size: int) -> list[SampleRecord]:
    """Uniformly keep at most `budget` candidates and build their records.

    `regressed_arrays` here hold decoded boxes (H, W, A, 4) per level, or
    None before any decode exists. A degenerate regressed target falls
    back to the matched ground-truth box.
    """
    if not candidates:
        return []
    if cfg.budget > 0 and len(candidates) > cfg.budget:
        keep = rng.choice(len(candidates), size=cfg.budget, replace=False)
        chosen = [candidates[i] for i in sorted(keep)]
    else:
        chosen = list(candidates)

    ratios = np.array([cfg.ratio_anchor, cfg.ratio_gt, cfg.ratio_regressed])
    draws = rng.choice(3, size=len(chosen), p=ratios)

    records = []
    for cand, draw in zip(chosen, draws):
        anchors = anchor_arrays[cand.level]
        anchor_box = anchors[cand.iy, cand.ix, cand.anchor]
        stride = strides[cand.level]
        gt_box = Box(*gt_boxes[cand.gt])
        ttype = TARGET_TYPES[draw]
        if ttype == "anchor":
            target = Box(*anchor_box)
        elif ttype == "regressed":
            target = _regressed_box(regressed_arrays, cand, image_size)
            if target is None:
                ttype = "gt"
                target = gt_box
        else:
            target = gt_box
        center = (0.5 * (anchor_box[0] + anchor_box[2]), 0.5 * (anchor_box[1] + anchor_box[3]))
        hw = (anchor_box[3] - anchor_box[1], anchor_box[2] - anchor_box[0])
        indicator = G.build_indicator(center, hw, target, stride, variant)
        mask_target = build_mask_target(gt_masks[cand.gt], target, out_res)
        records.append(SampleRecord(
            level=cand.level, stride=stride, iy=cand.iy, ix=cand.ix,
            anchor=cand.anchor, gt=cand.gt, target_type=ttype, target_box=target,
            indicator=indicator, mask_target=mask_target))
    return records


def build_mask_target(gt_mask: np.ndarray, box: Box, out_res: int) -> np.ndarray:
    """Bilinear crop of a full-image binary mask over the target box."""
    g = out_res
    ys = box.y1 + (np.arange(g)[:, None] + 0.5) * box.h / g
    xs = box.x1 + (np.arange(g)[None, :] + 0.5) * box.w / g
    ys = np.broadcast_to(ys, (g, g))
    xs = np.broadcast_to(xs, (g, g))
    return bilinear_sample_image(gt_mask.astype(np.float64), ys, xs)


def gather_patches(level_feats: list[Tensor], records: list[SampleRecord],
                   patch_size: int = 3) -> Tensor:
    """Per-record patch of the regression feature map, zero-padded at borders.

    Output is (P, C, patch_size, patch_size) in record order; gradients
    scatter back only to the gathered cells.
    """
    if patch_size % 2 != 1:
        raise ValueError("patch_size must be odd")
    pad = patch_size // 2
    dtype = level_feats[0].data.dtype
    c = level_feats[0].shape[0]
    p = len(records)
    out = np.zeros((p, c, patch_size, patch_size), dtype=dtype)
    padded = [np.pad(t.data, ((0, 0), (pad, pad), (pad, pad))) for t in level_feats]
    for r, rec in enumerate(records):
        out[r] = padded[rec.level][:, rec.iy:rec.iy + patch_size, rec.ix:rec.ix + patch_size]

    touched = {rec.level for rec in records}

    def bwd(g):
        grads = [np.zeros_like(pd) if (t.requires_grad and lvl in touched) else None
                 for lvl, (t, pd) in enumerate(zip(level_feats, padded))]
        for r, rec in enumerate(records):
            gl = grads[rec.level]
            if gl is not None:
                gl[:, rec.iy:rec.iy + patch_size, rec.ix:rec.ix + patch_size] += g[r]
        for t, gl in zip(level_feats, grads):
            if gl is not None:
                t.accumulate_grad(gl[:, pad:-pad, pad:-pad] if pad else gl)

    return record_op("gather_patches", tuple(level_feats), out, bwd)


def positives_per_gt(candidates: list[Candidate], num_gt: int) -> float:
    """Mean candidate count per ground truth (reported, not asserted)."""
    if num_gt == 0:
        return 0.0
    return len(candidates) / num_gt
