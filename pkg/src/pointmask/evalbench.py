"""Mask AP at toy scale, the analytic cost model, and throughput timing.

The cost model counts multiply-adds with documented closed forms. The
headline ``multiply_adds`` figure is the mask-feature computation path,
which is what distinguishes the two modes; the mask head costs the same
per evaluated unit in both modes and is reported separately, together
with a combined total.

dense_vanilla evaluates at every (level cell, anchor):
    feature: sum_s H_s*W_s*A * (E*D * C * K^2*B)
        one direct convolution from the C-channel map to the full K^2*B
        mask feature, kernel taps E*D (the same taps the decomposed path
        spreads over its up-scaling and instance convolutions)
pointins_sampled evaluates at P sampled points:
    feature: P * (E*C*K^2*E  +  U*E*B*D  +  K^2*E*B*D)
        channel up-scaling at the patch centre + the weight FC +
        the instance convolution
mask head, per unit in either mode:
    4*(9*B^2*K^2) + 4*B^2*K^2 + B*(2K)^2
        four 3x3 convs at width B on (K,K), the 2x2 stride-2 deconv,
        and the 1x1 projection on (2K,2K)
"""
from __future__ import annotations

import math
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from .config import BenchConfig, EvalConfig, ModelConfig

IOU_THRESHOLDS = [0.5 + 0.05 * i for i in range(10)]
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


# ---------------------------------------------------------------------------
# mask AP


@dataclass
class ApReport:
    ap: float
    ap50: float
    ap75: float
    per_class: dict[int, float] = field(default_factory=dict)
    mean_matched_iou: float = 0.0
    num_predictions: int = 0
    num_gts: int = 0

    def rows(self) -> list[tuple[str, float]]:
        out = [("AP", self.ap), ("AP50", self.ap50), ("AP75", self.ap75),
               ("mean_matched_iou", self.mean_matched_iou)]
        for cls in sorted(self.per_class):
            out.append((f"AP_class{cls}", self.per_class[cls]))
        return out


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    inter = np.logical_and(a, b).sum()
    union = np.logical_or(a, b).sum()
    return float(inter / union) if union else 0.0


def _match_class(preds, gts_by_image, thr):
    """Greedy score-ordered matching; returns (tp flags, matched ious, ngt)."""
    order = sorted(range(len(preds)), key=lambda i: (-preds[i][1], i))
    used: dict[tuple[int, int], bool] = {}
    ngt = sum(len(v) for v in gts_by_image.values())
    tp = np.zeros(len(preds), dtype=bool)
    ious = []
    for rank, i in enumerate(order):
        img, _, mask = preds[i]
        best, best_iou = -1, thr
        for gi, gmask in enumerate(gts_by_image.get(img, [])):
            if used.get((img, gi)):
                continue
            v = mask_iou(mask, gmask)
            if v >= best_iou:
                best, best_iou = gi, v
        if best >= 0:
            used[(img, best)] = True
            tp[rank] = True
            ious.append(best_iou)
    return tp, ious, ngt


def _ap_from_matches(tp: np.ndarray, ngt: int) -> float:
    if ngt == 0:
        return 0.0
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(~tp)
    recall = tp_cum / ngt
    precision = tp_cum / np.maximum(tp_cum + fp_cum, 1)
    # 101-point interpolation: best precision at recall >= r
    ap = 0.0
    for r in RECALL_POINTS:
        ok = precision[recall >= r]
        ap += ok.max() if ok.size else 0.0
    return ap / len(RECALL_POINTS)


def evaluate_masks(predictions: list[list[tuple[np.ndarray, float, int]]],
                   gts: list[tuple[list[np.ndarray], list[int]]]) -> ApReport:
    """COCO-style mask AP.

    `predictions[i]` holds (full-image bool mask, score, class) for image
    i; `gts[i]` is (list of gt masks, list of classes). AP averages the
    101-point interpolated precision over IoU thresholds 0.50:0.05:0.95
    and over the classes present in the ground truth.
    """
    classes = sorted({c for _, cls_list in gts for c in cls_list})
    n_preds = sum(len(p) for p in predictions)
    n_gts = sum(len(g[0]) for g in gts)
    if not classes:
        return ApReport(0.0, 0.0, 0.0, {}, 0.0, n_preds, n_gts)

    per_class: dict[int, float] = {}
    per_class_thr: dict[int, dict[float, float]] = {}
    matched_ious_50: list[float] = []
    for cls in classes:
        preds = []
        for img, plist in enumerate(predictions):
            for mask, score, pcls in plist:
                if pcls == cls:
                    preds.append((img, float(score), mask))
        gts_by_image = {}
        for img, (masks, cls_list) in enumerate(gts):
            keep = [m for m, c in zip(masks, cls_list) if c == cls]
            if keep:
                gts_by_image[img] = [m.astype(bool) for m in keep]
        aps = {}
        for thr in IOU_THRESHOLDS:
            tp, ious, ngt = _match_class(preds, gts_by_image, thr)
            aps[thr] = _ap_from_matches(tp, ngt)
            if thr == 0.5:
                matched_ious_50.extend(ious)
        per_class_thr[cls] = aps
        per_class[cls] = sum(aps.values()) / len(aps)

    ap = sum(per_class.values()) / len(classes)
    ap50 = sum(per_class_thr[c][0.5] for c in classes) / len(classes)
    ap75 = sum(per_class_thr[c][0.75] for c in classes) / len(classes)
    mmi = float(np.mean(matched_ious_50)) if matched_ious_50 else 0.0
    return ApReport(ap, ap50, ap75, per_class, mmi, n_preds, n_gts)


# ---------------------------------------------------------------------------
# analytic cost model

DENSE_VANILLA = "dense_vanilla"
POINTINS_SAMPLED = "pointins_sampled"


@dataclass
class CostReport:
    mode: str
    parameter_count: int
    multiply_adds: int          # mask-feature computation path
    head_multiply_adds: int
    total_multiply_adds: int
    components: dict[str, int]
    config: dict

    def rows(self) -> list[tuple[str, int]]:
        out = [("parameter_count", self.parameter_count),
               ("multiply_adds", self.multiply_adds),
               ("head_multiply_adds", self.head_multiply_adds),
               ("total_multiply_adds", self.total_multiply_adds)]
        out += sorted(self.components.items())
        return out


def grid_sizes(image_size: int, strides: list[int]) -> list[tuple[int, int]]:
    return [(-(-image_size // s), -(-image_size // s)) for s in strides]


def head_unit_macs(b: int, k: int) -> int:
    return 4 * (9 * b * b * k * k) + 4 * b * b * k * k + b * (2 * k) ** 2


def head_param_count(b: int) -> int:
    return 4 * (9 * b * b + b) + 4 * b * b + (b + 1)


def flop_count(cfg: ModelConfig, mode: str, image_size: int = 64,
               sample_points: int = 128) -> CostReport:
    """Exact multiply-add and parameter counts from the documented forms."""
    c = cfg.channels
    k = cfg.mask_resolution
    e = cfg.template_channels
    b = cfg.mask_channels
    d = cfg.kernel_area
    a = cfg.anchors_per_point
    u = cfg.indicator_width
    grids = grid_sizes(image_size, cfg.strides)
    positions = sum(h * w for h, w in grids)
    units = positions * a
    head_unit = head_unit_macs(b, k)
    echo = {"H_s": [h for h, _ in grids], "W_s": [w for _, w in grids],
            "A": a, "C": c, "K": k, "E": e, "B": b, "D": d, "U": u,
            "P": sample_points, "image_size": image_size,
            "mask_feature_elements": b * k * k}

    if mode == DENSE_VANILLA:
        feature_unit = e * d * c * k * k * b
        feature = units * feature_unit
        heads = units * head_unit
        sampled_unit = e * c * k * k * e + u * e * b * d + k * k * e * b * d
        components = {
            "mask_feature": feature,
            "mask_heads": heads,
            "pointins_dense_total": units * (sampled_unit + head_unit),
            "units": units,
        }
        params = a * (e * d * c * k * k * b + k * k * b) + head_param_count(b)
        return CostReport(mode, params, feature, heads, feature + heads, components, echo)

    if mode == POINTINS_SAMPLED:
        upscale = sample_points * (e * c * k * k * e)
        fc = sample_points * (u * e * b * d)
        iconv = sample_points * (k * k * e * b * d)
        heads = sample_points * head_unit
        feature = upscale + fc + iconv
        components = {
            "channel_upscale": upscale,
            "weight_fc": fc,
            "instance_conv": iconv,
            "mask_heads": heads,
            "units": sample_points,
        }
        params = (k * k * e * c * e + k * k * e) + (e * b * d * (u + 1)) + head_param_count(b)
        return CostReport(mode, params, feature, heads, feature + heads, components, echo)

    raise ValueError(f"unknown cost mode {mode!r}")


# ---------------------------------------------------------------------------
# throughput microbenchmark


@dataclass
class BenchResult:
    images: int
    sample_points: int
    repetitions: int
    detector_times: list[float]
    mask_times: list[float]
    points_per_sec_median: float
    points_per_sec_iqr: float
    images_per_sec_median: float
    images_per_sec_iqr: float
    output_checksum: float

    def rows(self) -> list[tuple[str, float]]:
        return [("images", self.images), ("sample_points", self.sample_points),
                ("repetitions", self.repetitions),
                ("points_per_sec_median", self.points_per_sec_median),
                ("points_per_sec_iqr", self.points_per_sec_iqr),
                ("images_per_sec_median", self.images_per_sec_median),
                ("images_per_sec_iqr", self.images_per_sec_iqr),
                ("output_checksum", self.output_checksum)]


def _iqr(values: list[float]) -> float:
    qs = statistics.quantiles(values, n=4) if len(values) > 1 else [values[0]] * 3
    return qs[2] - qs[0]


def synthetic_records(model, image_hw: tuple[int, int], count: int):
    """Deterministic record tiling used to drive the mask stage at fixed P."""
    from .geometry import Box, build_indicator
    from .sampler import SampleRecord
    grids = model.anchor_grids(image_hw)
    anchors = model.anchor_arrays(image_hw)
    out = []
    i = 0
    while len(out) < count:
        lvl = i % len(grids)
        g = grids[lvl]
        cell = (i // len(grids)) % (g.height * g.width)
        iy, ix = divmod(cell, g.width)
        ai = i % g.anchors_per_point
        ab = anchors[lvl][iy, ix, ai]
        center = (0.5 * (ab[0] + ab[2]), 0.5 * (ab[1] + ab[3]))
        hw = (ab[3] - ab[1], ab[2] - ab[0])
        target = Box(center[0] - 0.6 * hw[1], center[1] - 0.6 * hw[0],
                     center[0] + 0.6 * hw[1], center[1] + 0.6 * hw[0])
        indicator = build_indicator(center, hw, target, g.stride, model.cfg.variant)
        out.append(SampleRecord(level=lvl, stride=g.stride, iy=iy, ix=ix, anchor=ai,
                                gt=0, target_type="anchor", target_box=target,
                                indicator=indicator,
                                mask_target=np.zeros((2 * model.cfg.mask_resolution,) * 2)))
        i += 1
    return out


def throughput_bench(model, scenes, repetitions: int, sample_points: int) -> BenchResult:
    """Median and IQR of detector-stage and mask-stage rates.

    Deterministic input order; one warm-up repetition is discarded.
    Mask outputs are checksummed so callers can assert value stability.
    """
    from . import sampler as S
    from .tensor import Tensor

    records = synthetic_records(model, scenes[0].image.shape[-2:], sample_points)
    det_times, mask_times = [], []
    checksum = 0.0
    for rep in range(repetitions + 1):
        t0 = time.perf_counter()
        flasts = []
        for scene in scenes:
            outs = model.detection_forward(Tensor(scene.image, dtype=model.dtype))
            flasts.append([o[2] for o in outs])
        t1 = time.perf_counter()
        total = 0.0
        patch_size = int(math.isqrt(model.cfg.template_channels))
        for flast in flasts:
            patches = S.gather_patches(flast, records, patch_size=patch_size)
            inds = Tensor(np.stack([r.indicator for r in records]), dtype=model.dtype)
            logits = model.mask_forward(patches, inds)
            total += float(np.abs(logits.data).sum())
        t2 = time.perf_counter()
        if rep == 0:
            checksum = total
            continue  # warm-up
        assert total == checksum  # identical inputs give identical outputs
        det_times.append(t1 - t0)
        mask_times.append(t2 - t1)

    n = len(scenes)
    pts_rates = [sample_points * n / t for t in mask_times]
    img_rates = [n / (a + b) for a, b in zip(det_times, mask_times)]
    return BenchResult(
        images=n, sample_points=sample_points, repetitions=repetitions,
        detector_times=det_times, mask_times=mask_times,
        points_per_sec_median=statistics.median(pts_rates),
        points_per_sec_iqr=_iqr(pts_rates),
        images_per_sec_median=statistics.median(img_rates),
        images_per_sec_iqr=_iqr(img_rates),
        output_checksum=checksum)
