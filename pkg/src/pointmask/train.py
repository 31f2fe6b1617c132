"""Deterministic training loop: joint detection and mask objective."""
from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from . import detector as Det
from . import losses as L
from . import pipeline
from . import sampler as S
from . import tensor as T
from .config import RunConfig
from .data import SyntheticScene
from .losses import LossWeights
from .model import Model
from .seeding import derive_rng
from .tensor import Tape, Tensor, backward


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, batch: list[int], detail: str):
        super().__init__(f"non-finite loss at step {step} (batch scenes {batch}): {detail}")
        self.step = step
        self.batch = batch


def lr_at(cfg, step: int) -> float:
    lr = cfg.optimizer.lr
    for frac in cfg.optimizer.decay_at:
        if step > frac * cfg.optimizer.steps:
            lr *= cfg.optimizer.decay_factor
    return lr


def _image_losses(model: Model, cfg: RunConfig, scene: SyntheticScene, step: int,
                  img_slot: int, seed: int):
    """Forward one scene: detection losses plus pooled mask-record terms."""
    outs = model.detection_forward(Tensor(scene.image, dtype=model.dtype))
    anchors = model.anchor_arrays(scene.image.shape[-2:])
    flat_anchors = np.concatenate([a.reshape(-1, 4) for a in anchors])
    strides_per = np.concatenate([
        np.full(a.shape[0] * a.shape[1] * a.shape[2], s)
        for a, s in zip(anchors, model.cfg.strides)])

    ccls = model.cfg.num_classes
    cls_flat = T.concat([model.flatten_level(o[0], ccls) for o in outs], axis=0)
    reg_flat = T.concat([model.flatten_level(o[1], 4) for o in outs], axis=0)

    gt_classes = np.asarray(scene.classes, dtype=np.int64)
    match = Det.match_anchors(flat_anchors, scene.boxes, gt_classes, ccls,
                              model.cfg.variant, strides_per,
                              pos_iou=cfg.loss.match_pos_iou,
                              neg_iou=cfg.loss.match_neg_iou,
                              force_match=cfg.loss.force_match)
    cls_loss = Det.focal_loss(cls_flat, match.cls_targets, include=match.include,
                              alpha=cfg.loss.focal_alpha, gamma=cfg.loss.focal_gamma)
    reg_loss = Det.smooth_l1_loss(reg_flat, match.reg_targets, match.positive,
                                  beta=cfg.loss.smooth_l1_beta)
    det_loss = T.add(cls_loss, reg_loss)

    # mask stage: decoded boxes are treated as sampled values (no gradient)
    _, regs_np = pipeline.level_outputs_numpy(model, outs)
    decoded = pipeline.decode_all(model, regs_np, anchors)
    cands = S.find_positive_candidates(anchors, decoded, scene.boxes, cfg.sampler)
    rng = derive_rng(seed, "sample", step, img_slot)
    k2 = 2 * model.cfg.mask_resolution
    records = S.sample_training_points(
        cands, anchors, decoded, scene.boxes, scene.masks, model.cfg.strides,
        model.cfg.variant, out_res=k2, cfg=cfg.sampler, rng=rng,
        image_size=scene.image.shape[-1])

    mask_inputs = None
    if records:
        patch = int(math.isqrt(model.cfg.template_channels))
        flast = [o[2] for o in outs]
        patches = S.gather_patches(flast, records, patch_size=patch)
        inds = Tensor(np.stack([r.indicator for r in records]), dtype=model.dtype)
        targets = np.stack([r.mask_target for r in records])
        weights = L.edge_weight_map(targets, edge_weight=cfg.loss.edge_weight,
                                    neighborhood=cfg.loss.edge_neighborhood)
        mask_inputs = (patches, inds, targets, weights)
    return det_loss, mask_inputs


def train_run(cfg: RunConfig, train_scenes: list[SyntheticScene], out_dir: str | Path,
              seed: int | None = None) -> dict:
    """Train for cfg.optimizer.steps; returns a summary with metric rows.

    Fully deterministic given (config, seed): batch order, sampling, and
    gradient reduction are all keyed by the seed, and reduction happens
    in fixed record order.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seed = cfg.data.seed if seed is None else seed
    model = Model.from_config(cfg.model, seed=seed)
    params = model.parameters()
    state = T.AdamState(params, lr=cfg.optimizer.lr, beta1=cfg.optimizer.beta1,
                        beta2=cfg.optimizer.beta2, eps=cfg.optimizer.eps)
    weights = LossWeights(cfg.loss.lambda_det, cfg.loss.lambda_mask, cfg.loss.edge_weight)
    n = len(train_scenes)
    batch = cfg.optimizer.batch_size
    rows = []
    ckpt_meta = {"config_hash": cfg.config_hash(), "seed": seed}

    for step in range(1, cfg.optimizer.steps + 1):
        order_rng = derive_rng(seed, "batch", step)
        idxs = [int(i) for i in order_rng.choice(n, size=min(batch, n), replace=False)]
        model.zero_grads()
        state.lr = lr_at(cfg, step)
        try:
            with Tape() as tape:
                det_terms = []
                mask_parts = []
                for slot, idx in enumerate(idxs):
                    det_loss, mask_inputs = _image_losses(
                        model, cfg, train_scenes[idx], step, slot, seed)
                    det_terms.append(det_loss)
                    if mask_inputs is not None:
                        mask_parts.append(mask_inputs)
                det_total = det_terms[0]
                for t in det_terms[1:]:
                    det_total = T.add(det_total, t)
                det_total = T.scale(det_total, 1.0 / len(det_terms))
                mask_total = None
                if mask_parts:
                    patches = T.concat([p[0] for p in mask_parts], axis=0) \
                        if len(mask_parts) > 1 else mask_parts[0][0]
                    inds = Tensor(np.concatenate([p[1].data for p in mask_parts]),
                                  dtype=model.dtype)
                    targets = np.concatenate([p[2] for p in mask_parts])
                    wmaps = np.concatenate([p[3] for p in mask_parts])
                    logits = model.mask_forward(patches, inds)
                    mask_total = L.weighted_bce(logits, targets, wmaps)
                total = L.total_loss(det_total, mask_total, weights)
            backward(tape, total)
            T.adam_step(params, [p.grad for p in params], state)
        except T.NonFiniteError as exc:
            diag = {"step": step, "batch_scenes": idxs, "seed": seed, "error": str(exc)}
            with open(out_dir / "diagnostic.json", "w") as fh:
                json.dump(diag, fh, indent=1)
            raise TrainingDiverged(step, idxs, str(exc)) from exc

        l_det = float(det_total.data)
        l_mask = float(mask_total.data) if mask_total is not None else 0.0
        rows.append((step, l_det, l_mask, float(total.data), state.lr))
        if cfg.optimizer.checkpoint_every and step % cfg.optimizer.checkpoint_every == 0 \
                and step != cfg.optimizer.steps:
            model.save(out_dir / f"checkpoint_{step:06d}", meta={**ckpt_meta, "step": step})

    model.save(out_dir / "checkpoint_final", meta={**ckpt_meta, "step": cfg.optimizer.steps})
    return {"rows": rows, "model": model, "seed": seed}
