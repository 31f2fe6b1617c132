"""Mask loss (edge-weighted BCE) and total loss assembly."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor, record_op


@dataclass
class LossWeights:
    lambda_det: float = 1.0
    lambda_mask: float = 2.0
    edge_weight: float = 4.0

    def validate(self) -> list[str]:
        errs = []
        for name in ("lambda_det", "lambda_mask", "edge_weight"):
            if getattr(self, name) <= 0:
                errs.append(f"{name}: must be positive")
        return errs


def edge_weight_map(mask_target: np.ndarray, edge_weight: float = 4.0,
                    neighborhood: int = 4) -> np.ndarray:
    """Weight 4 on cells whose binarized value differs from any neighbour.

    The default neighbourhood is the 4-connected one; 8 is available.
    """
    binar = mask_target >= 0.5
    edge = np.zeros_like(binar)
    shifts = [(0, 1), (0, -1), (1, 0), (-1, 0)]
    if neighborhood == 8:
        shifts += [(1, 1), (1, -1), (-1, 1), (-1, -1)]
    elif neighborhood != 4:
        raise ValueError(f"unsupported neighborhood {neighborhood}")
    for dy, dx in shifts:
        shifted = np.roll(binar, (dy, dx), axis=(-2, -1))
        differs = binar != shifted
        # roll wraps around; wrapped comparisons are not real neighbours
        if dy == 1:
            differs[..., 0, :] = False
        elif dy == -1:
            differs[..., -1, :] = False
        if dx == 1:
            differs[..., :, 0] = False
        elif dx == -1:
            differs[..., :, -1] = False
        edge |= differs
    out = np.ones(mask_target.shape, dtype=np.float64)
    out[edge] = edge_weight
    return out


def _stable_bce_terms(logits: np.ndarray, targets: np.ndarray):
    # ce = softplus(x) - x*t, computed as max(x,0) - x*t + log1p(exp(-|x|))
    ce = np.maximum(logits, 0) - logits * targets + np.log1p(np.exp(-np.abs(logits)))
    return ce


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def weighted_bce(logits: Tensor, targets: np.ndarray, weights: np.ndarray) -> Tensor:
    """Mean over cells of weight * BCE(sigmoid(logit), target), in logit space."""
    targets = np.asarray(targets, dtype=logits.data.dtype)
    weights = np.asarray(weights, dtype=logits.data.dtype)
    if targets.shape != logits.shape or weights.shape != logits.shape:
        raise T.TensorError("weighted_bce: shape mismatch")
    ce = _stable_bce_terms(logits.data, targets)
    n = logits.data.dtype.type(logits.size)
    out = np.asarray((weights * ce).sum() / n, dtype=logits.data.dtype)

    def bwd(g):
        if logits.requires_grad:
            logits.accumulate_grad(g * weights * (_sigmoid(logits.data) - targets) / n)

    return record_op("weighted_bce", (logits,), out, bwd)


def total_loss(det_loss: Tensor, mask_loss: Tensor | None, weights: LossWeights) -> Tensor:
    """lambda_det * L_det + lambda_mask * L_mask; empty mask term is zero."""
    if not np.all(np.isfinite(det_loss.data)):
        raise T.NonFiniteError("total_loss: non-finite detection loss")
    out = T.scale(det_loss, weights.lambda_det)
    if mask_loss is not None:
        if not np.all(np.isfinite(mask_loss.data)):
            raise T.NonFiniteError("total_loss: non-finite mask loss")
        out = T.add(out, T.scale(mask_loss, weights.lambda_mask))
    return out
