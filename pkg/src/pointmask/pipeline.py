"""Inference path: detect boxes first, then predict masks for survivors."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import detector as Det
from . import maskgen
from . import sampler as S
from .config import EvalConfig
from .data import SyntheticScene
from .evalbench import ApReport, evaluate_masks
from .geometry import Box, build_indicator
from .model import Model
from .tensor import Tensor


def level_outputs_numpy(model: Model, outs):
    """Per level sigmoid class scores and regressions as (H, W, A, ...) arrays."""
    a = model.cfg.anchors_per_point
    cls_scores, regs, decoded = [], [], []
    for lvl, (cls_t, reg_t, _) in enumerate(outs):
        _, h, w = cls_t.shape
        ccls = model.cfg.num_classes
        logits = cls_t.data.reshape(a, ccls, h, w).transpose(2, 3, 0, 1)
        cls_scores.append(1.0 / (1.0 + np.exp(-logits.astype(np.float64))))
        reg = reg_t.data.reshape(a, 4, h, w).transpose(2, 3, 0, 1).astype(np.float64)
        regs.append(reg)
    return cls_scores, regs


def decode_all(model: Model, regs: list[np.ndarray], anchors: list[np.ndarray]):
    """Clamped bulk decode of every anchor's regression (no gradients)."""
    from .geometry import decode_box
    out = []
    for lvl, (reg, anc) in enumerate(zip(regs, anchors)):
        r = np.clip(reg, -4.0, 4.0)
        out.append(decode_box(anc, r, model.cfg.variant,
                              stride=float(model.cfg.strides[lvl])))
    return out


def predict_scene(model: Model, image: np.ndarray, cfg: EvalConfig):
    """Boxes by NMS first, then one mask per surviving detection."""
    outs = model.detection_forward(Tensor(image, dtype=model.dtype))
    cls_scores, regs = level_outputs_numpy(model, outs)
    anchors = model.anchor_arrays(image.shape[-2:])
    dets = Det.detect(cls_scores, regs, anchors, model.cfg.strides, model.cfg.variant,
                      score_threshold=cfg.score_threshold, nms_iou=cfg.nms_iou,
                      pre_nms_topk=cfg.pre_nms_topk, max_detections=cfg.max_detections)
    if not dets:
        return []
    k2 = 2 * model.cfg.mask_resolution
    records = []
    for d in dets:
        ab = anchors[d.level][d.iy, d.ix, d.anchor]
        center = (0.5 * (ab[0] + ab[2]), 0.5 * (ab[1] + ab[3]))
        hw = (ab[3] - ab[1], ab[2] - ab[0])
        target = Box(*d.box)
        records.append(S.SampleRecord(
            level=d.level, stride=d.stride, iy=d.iy, ix=d.ix, anchor=d.anchor,
            gt=-1, target_type="regressed", target_box=target,
            indicator=build_indicator(center, hw, target, d.stride, model.cfg.variant),
            mask_target=np.zeros((k2, k2))))
    flast = [o[2] for o in outs]
    patch = int(math.isqrt(model.cfg.template_channels))
    patches = S.gather_patches(flast, records, patch_size=patch)
    inds = Tensor(np.stack([r.indicator for r in records]), dtype=model.dtype)
    logits = model.mask_forward(patches, inds)
    probs = 1.0 / (1.0 + np.exp(-logits.data.astype(np.float64)))
    hw_img = image.shape[-2:]
    out = []
    for d, rec, p in zip(dets, records, probs):
        mask = maskgen.paste_mask(p, rec.target_box, hw_img, threshold=cfg.mask_threshold)
        out.append((mask, d.score, d.cls))
    return out


def evaluate_model(model: Model, scenes: list[SyntheticScene], cfg: EvalConfig,
                   threads: int = 1) -> ApReport:
    """Detection, mask prediction, and mask AP over a scene list."""
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            preds = list(pool.map(lambda s: predict_scene(model, s.image, cfg), scenes))
    else:
        preds = [predict_scene(model, s.image, cfg) for s in scenes]
    gts = [([m for m in s.masks], list(s.classes)) for s in scenes]
    return evaluate_masks(preds, gts)
