"""Instance-aware mask generation.

One point-of-interest patch becomes an instance-agnostic template via a
channel up-scaling convolution; one indicator vector becomes dynamic
convolution weights via FC+ReLU; convolving the template with those
weights yields the per-instance mask feature, which a small conv head
turns into mask logits at twice the template resolution.

All forward functions accept a single sample or a leading batch axis of
independent samples.
"""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .geometry import Box
from .tensor import Tensor, record_op


class MaskGenError(ValueError):
    pass


def template_from_patch(patch: Tensor, weight: Tensor, bias: Tensor,
                        template_channels: int) -> Tensor:
    """Up-scale a (C, k, k) patch to channels C*E and reshape to (E, K, K).

    The up-scaling kernel is sqrt(E) x sqrt(E) and the patch has matching
    extent, so one output position holds the whole K^2*E vector; that
    vector is reshaped row-major. K is sqrt(C) and must be integral.
    """
    e = template_channels
    ke = int(math.isqrt(e))
    if ke * ke != e:
        raise MaskGenError(f"template channel count {e} is not a perfect square")
    batched = patch.data.ndim == 4
    c = patch.shape[1] if batched else patch.shape[0]
    k = int(math.isqrt(c))
    if k * k != c:
        raise MaskGenError(f"patch channel count {c} is not a perfect square")
    out = T.conv2d(patch, weight, bias, stride=1, padding=0)
    if batched:
        return T.reshape(out, (patch.shape[0], e, k, k))
    return T.reshape(out, (e, k, k))


def weights_from_indicator(indicator: Tensor, fc_weight: Tensor, fc_bias: Tensor,
                           template_channels: int, feature_channels: int,
                           kernel_area: int) -> Tensor:
    """FC + ReLU over the indicator, viewed as (B, E, sqrt(D), sqrt(D))."""
    e, b, d = template_channels, feature_channels, kernel_area
    kd = int(math.isqrt(d))
    if kd * kd != d:
        raise MaskGenError(f"kernel area {d} is not a perfect square")
    if fc_weight.shape[0] != e * b * d:
        raise MaskGenError(f"fc output width {fc_weight.shape[0]} != E*B*D = {e * b * d}")
    raw = T.relu(T.fully_connected(indicator, fc_weight, fc_bias))
    if indicator.data.ndim == 2:
        return T.reshape(raw, (indicator.shape[0], b, e, kd, kd))
    return T.reshape(raw, (b, e, kd, kd))


def instance_conv(template: Tensor, weight: Tensor) -> Tensor:
    """Convolve the template with data-dependent weights.

    template (E, K, K), weight (B, E, sqrt(D), sqrt(D)) -> (B, K, K) with
    same-padding; odd sqrt(D) required. Differentiable in both operands.
    Batched forms carry a shared leading axis: each sample is convolved
    with its own weight.
    """
    batched = template.data.ndim == 4
    td = template.data if batched else template.data[None]
    wd = weight.data if batched else weight.data[None]
    p, e, k, _ = td.shape
    pw, b, ew, kd, kd2 = wd.shape
    if pw != p:
        raise MaskGenError(f"batch mismatch: {p} templates vs {pw} weights")
    if ew != e:
        raise MaskGenError(f"channel mismatch: template E={e}, weight expects {ew}")
    if kd != kd2 or kd % 2 != 1:
        raise MaskGenError(f"instance kernel must be square and odd, got {kd}x{kd2}")
    pad = kd // 2
    tp = np.pad(td, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(tp, (kd, kd), axis=(2, 3))
    out = np.einsum("peyxuv,pbeuv->pbyx", win, wd, optimize=True)
    out = np.ascontiguousarray(out if batched else out[0], dtype=td.dtype)

    def bwd(g):
        gb = g if batched else g[None]
        if weight.requires_grad:
            gw = np.einsum("peyxuv,pbyx->pbeuv", win, gb, optimize=True)
            weight.accumulate_grad(gw if batched else gw[0])
        if template.requires_grad:
            gtp = np.zeros_like(tp)
            for u in range(kd):
                for v in range(kd):
                    gtp[:, :, u:u + k, v:v + k] += np.einsum(
                        "pbyx,pbe->peyx", gb, wd[:, :, :, u, v], optimize=True)
            gt = gtp[:, :, pad:pad + k, pad:pad + k] if pad else gtp
            template.accumulate_grad(gt if batched else gt[0])

    return record_op("instance_conv", (template, weight), out, bwd)


def mask_head(feature: Tensor, params: dict[str, Tensor]) -> Tensor:
    """Four 3x3 conv+ReLU blocks, a stride-2 deconv block, 1x1 projection.

    feature (B, K, K) or (P, B, K, K) -> logits (2K, 2K) or (P, 2K, 2K).
    """
    h = feature
    for i in range(4):
        h = T.relu(T.conv2d(h, params[f"head.conv{i}.w"], params[f"head.conv{i}.b"], padding=1))
    h = T.relu(T.transposed_conv2d(h, params["head.deconv.w"], stride=2))
    h = T.conv2d(h, params["head.out.w"], params["head.out.b"])
    if h.data.ndim == 4:
        return T.reshape(h, (h.shape[0], h.shape[2], h.shape[3]))
    return T.reshape(h, (h.shape[1], h.shape[2]))


# ---------------------------------------------------------------------------
# resampling between mask grids and image space (inference / target side,
# plain numpy, not differentiated)


def bilinear_sample_image(src: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample `src` (H, W) at continuous points; zero outside the image.

    Pixel (r, c) covers [r, r+1) x [c, c+1) with its center at (+0.5).
    """
    h, w = src.shape
    u = ys - 0.5
    v = xs - 0.5
    r0 = np.floor(u).astype(np.int64)
    c0 = np.floor(v).astype(np.int64)
    fr = u - r0
    fc = v - c0
    out = np.zeros(ys.shape, dtype=np.float64)
    for dr in (0, 1):
        for dc in (0, 1):
            rr = r0 + dr
            cc = c0 + dc
            wgt = (fr if dr else 1 - fr) * (fc if dc else 1 - fc)
            ok = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
            if ok.any():
                out[ok] += wgt[ok] * src[rr[ok], cc[ok]]
    return out


def paste_mask(probs: np.ndarray, box: Box | np.ndarray, image_hw: tuple[int, int],
               threshold: float = 0.5) -> np.ndarray:
    """Resize the probability grid to the box and binarize onto a canvas."""
    h, w = image_hw
    arr = box.as_array() if isinstance(box, Box) else np.asarray(box, dtype=np.float64)
    x1 = max(0.0, arr[0])
    y1 = max(0.0, arr[1])
    x2 = min(float(w), arr[2])
    y2 = min(float(h), arr[3])
    canvas = np.zeros((h, w), dtype=bool)
    if x2 <= x1 or y2 <= y1:
        return canvas
    g = probs.shape[0]
    c0, c1 = int(math.floor(x1)), int(math.ceil(x2))
    r0, r1 = int(math.floor(y1)), int(math.ceil(y2))
    cols = np.arange(c0, c1) + 0.5
    rows = np.arange(r0, r1) + 0.5
    cz, rz = np.meshgrid(cols, rows)
    inside = (cz >= x1) & (cz < x2) & (rz >= y1) & (rz < y2)
    # pixel centers mapped into grid coordinates, clamped to the grid border
    gx = (cz - arr[0]) / (arr[2] - arr[0]) * g
    gy = (rz - arr[1]) / (arr[3] - arr[1]) * g
    gx = np.clip(gx, 0.5, g - 0.5)
    gy = np.clip(gy, 0.5, g - 0.5)
    vals = bilinear_sample_image(probs.astype(np.float64), gy, gx)
    block = (vals >= threshold) & inside
    canvas[r0:r1, c0:c1] = block
    return canvas
