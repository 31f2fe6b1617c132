"""Boxes, anchor grids, IoU, regression codecs, indicators, and NMS.

Everything here is a pure value transformation on plain floats or numpy
arrays; bulk paths operate on (N,4) arrays in (x1, y1, x2, y2) order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

ANCHOR_BASED = "anchor_based"
ANCHOR_FREE = "anchor_free"

# indicator widths per detector style
INDICATOR_WIDTH = {ANCHOR_BASED: 10, ANCHOR_FREE: 7}


class GeometryError(ValueError):
    pass


class DegenerateBoxError(GeometryError):
    """A decoded box has a non-positive side."""


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise GeometryError(f"degenerate box {self}")

    @property
    def cx(self) -> float:
        return 0.5 * (self.x1 + self.x2)

    @property
    def cy(self) -> float:
        return 0.5 * (self.y1 + self.y2)

    @property
    def w(self) -> float:
        return self.x2 - self.x1

    @property
    def h(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)


@dataclass
class AnchorGrid:
    """Per-level anchor layout: centers at ((ix+0.5)*s, (iy+0.5)*s)."""

    stride: int
    height: int
    width: int
    sizes: list[tuple[float, float]] = field(default_factory=list)  # (h, w) per anchor

    def __post_init__(self):
        if self.stride <= 0 or self.height <= 0 or self.width <= 0:
            raise GeometryError("AnchorGrid needs positive stride and extents")
        if not self.sizes:
            raise GeometryError("AnchorGrid needs at least one anchor size")
        for h, w in self.sizes:
            if h <= 0 or w <= 0:
                raise GeometryError(f"non-positive anchor size ({h}, {w})")

    @property
    def anchors_per_point(self) -> int:
        return len(self.sizes)


def make_anchor_sizes(stride: int, base_factor: float, scales: list[float],
                      ratios: list[float]) -> list[tuple[float, float]]:
    """(h, w) pairs for scale x ratio combos; ratio r gives h/w == r."""
    sizes = []
    for s in scales:
        side = base_factor * stride * s
        for r in ratios:
            sizes.append((side * math.sqrt(r), side / math.sqrt(r)))
    return sizes


def tile_anchors(grid: AnchorGrid) -> np.ndarray:
    """All anchor boxes for a level, shape (H, W, A, 4)."""
    s = float(grid.stride)
    cy = (np.arange(grid.height) + 0.5) * s
    cx = (np.arange(grid.width) + 0.5) * s
    sizes = np.asarray(grid.sizes, dtype=np.float64)  # (A, 2) as (h, w)
    hh = sizes[:, 0]
    ww = sizes[:, 1]
    out = np.empty((grid.height, grid.width, len(grid.sizes), 4), dtype=np.float64)
    out[..., 0] = cx[None, :, None] - 0.5 * ww[None, None, :]
    out[..., 1] = cy[:, None, None] - 0.5 * hh[None, None, :]
    out[..., 2] = cx[None, :, None] + 0.5 * ww[None, None, :]
    out[..., 3] = cy[:, None, None] + 0.5 * hh[None, None, :]
    return out


def iou(a: Box, b: Box) -> float:
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (N,4) and (M,4) box arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    iy = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


# ---------------------------------------------------------------------------
# regression codecs
#
# anchor_based: RetinaNet-style center offsets normalized by anchor size
# plus log size ratios. anchor_free: distances from the point to the four
# box sides, normalized by stride.

_MIN_DIST = 1e-3  # in strides; floor for anchor_free decode


def encode_box(anchor: np.ndarray, target: np.ndarray, variant: str,
               stride: float | None = None) -> np.ndarray:
    a = np.asarray(anchor, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if variant == ANCHOR_BASED:
        aw = a[..., 2] - a[..., 0]
        ah = a[..., 3] - a[..., 1]
        acx = 0.5 * (a[..., 0] + a[..., 2])
        acy = 0.5 * (a[..., 1] + a[..., 3])
        tw = t[..., 2] - t[..., 0]
        th = t[..., 3] - t[..., 1]
        tcx = 0.5 * (t[..., 0] + t[..., 2])
        tcy = 0.5 * (t[..., 1] + t[..., 3])
        return np.stack([(tcx - acx) / aw, (tcy - acy) / ah,
                         np.log(tw / aw), np.log(th / ah)], axis=-1)
    if variant == ANCHOR_FREE:
        if stride is None:
            raise GeometryError("anchor_free encoding needs the stride")
        px = 0.5 * (a[..., 0] + a[..., 2])
        py = 0.5 * (a[..., 1] + a[..., 3])
        return np.stack([(px - t[..., 0]) / stride, (py - t[..., 1]) / stride,
                         (t[..., 2] - px) / stride, (t[..., 3] - py) / stride], axis=-1)
    raise GeometryError(f"unknown variant {variant!r}")


def decode_box(anchor: np.ndarray, regression: np.ndarray, variant: str,
               stride: float | None = None, clamp: bool = True) -> np.ndarray:
    a = np.asarray(anchor, dtype=np.float64)
    r = np.asarray(regression, dtype=np.float64)
    if not np.all(np.isfinite(r)):
        raise GeometryError("non-finite regression values")
    if variant == ANCHOR_BASED:
        aw = a[..., 2] - a[..., 0]
        ah = a[..., 3] - a[..., 1]
        acx = 0.5 * (a[..., 0] + a[..., 2])
        acy = 0.5 * (a[..., 1] + a[..., 3])
        cx = acx + r[..., 0] * aw
        cy = acy + r[..., 1] * ah
        w = aw * np.exp(r[..., 2])
        h = ah * np.exp(r[..., 3])
        out = np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=-1)
    elif variant == ANCHOR_FREE:
        if stride is None:
            raise GeometryError("anchor_free decoding needs the stride")
        px = 0.5 * (a[..., 0] + a[..., 2])
        py = 0.5 * (a[..., 1] + a[..., 3])
        d = np.clip(r, _MIN_DIST, None) if clamp else r
        out = np.stack([px - d[..., 0] * stride, py - d[..., 1] * stride,
                        px + d[..., 2] * stride, py + d[..., 3] * stride], axis=-1)
    else:
        raise GeometryError(f"unknown variant {variant!r}")
    if np.any(out[..., 2] <= out[..., 0]) or np.any(out[..., 3] <= out[..., 1]):
        raise DegenerateBoxError("decoded box has a non-positive side")
    return out


def decode_box_safe(anchor, regression, variant, stride=None):
    """decode_box that returns None instead of raising on degeneracy."""
    try:
        return decode_box(anchor, regression, variant, stride=stride)
    except DegenerateBoxError:
        return None


# ---------------------------------------------------------------------------
# instance indicator


def build_indicator(anchor_center: tuple[float, float], anchor_hw: tuple[float, float] | None,
                    target: Box, stride: float, variant: str) -> np.ndarray:
    """Explicit per-instance descriptor fed to the weight generator.

    anchor_based layout (U=10):
      [1/s, h/w, h/s, w/s, r_x, r_y, p_l, p_r, p_b, p_t]
    anchor_free layout (U=7) drops the anchor-shape block:
      [1/s, r_x, r_y, p_l, p_r, p_b, p_t]

    r is the center offset between target and anchor in strides; p is the
    distance from the anchor center to each target side in strides, so
    p_l + p_r == w/s and p_t + p_b == h/s by construction.
    """
    xo, yo = anchor_center
    s = float(stride)
    rx = (target.cx - xo) / s
    ry = (target.cy - yo) / s
    half_w = 0.5 * (target.w / s)
    half_h = 0.5 * (target.h / s)
    pl = half_w - rx
    pr = half_w + rx
    pb = half_h + ry
    pt = half_h - ry
    if variant == ANCHOR_BASED:
        if anchor_hw is None:
            raise GeometryError("anchor_based indicator needs the anchor size")
        ah, aw = anchor_hw
        return np.array([1.0 / s, ah / aw, ah / s, aw / s, rx, ry, pl, pr, pb, pt],
                        dtype=np.float64)
    if variant == ANCHOR_FREE:
        return np.array([1.0 / s, rx, ry, pl, pr, pb, pt], dtype=np.float64)
    raise GeometryError(f"unknown variant {variant!r}")


# ---------------------------------------------------------------------------
# non-maximum suppression


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float = 0.5,
        max_keep: int | None = None) -> list[int]:
    """Greedy descending-score suppression; ties broken by lower index."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if len(boxes) != len(scores):
        raise GeometryError("nms: boxes and scores disagree in length")
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    kept: list[int] = []
    for i in order:
        if max_keep is not None and len(kept) >= max_keep:
            break
        ok = True
        for j in kept:
            if _iou_rows(boxes[i], boxes[j]) > iou_threshold:
                ok = False
                break
        if ok:
            kept.append(i)
    return kept


def _iou_rows(a: np.ndarray, b: np.ndarray) -> float:
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def clip_box(box: np.ndarray, height: float, width: float) -> np.ndarray | None:
    """Clip to image bounds; None when nothing remains."""
    x1 = max(0.0, float(box[0]))
    y1 = max(0.0, float(box[1]))
    x2 = min(float(width), float(box[2]))
    y2 = min(float(height), float(box[3]))
    if x2 <= x1 or y2 <= y1:
        return None
    return np.array([x1, y1, x2, y2], dtype=np.float64)
