"""Geometry: anchors, IoU, codecs, indicator algebra, NMS vs brute force."""
import numpy as np
import numpy.testing as npt
import pytest

from pointmask import geometry as G
from pointmask.geometry import (ANCHOR_BASED, ANCHOR_FREE, AnchorGrid, Box,
                                build_indicator, decode_box, encode_box, iou,
                                nms, tile_anchors)


class TestTileAnchors:
    def test_single_cell(self):
        grid = AnchorGrid(stride=8, height=1, width=1, sizes=[(8.0, 8.0)])
        boxes = tile_anchors(grid)
        assert boxes.shape == (1, 1, 1, 4)
        npt.assert_array_equal(boxes[0, 0, 0], [0, 0, 8, 8])

    def test_2x2_centers(self):
        grid = AnchorGrid(stride=8, height=2, width=2, sizes=[(8.0, 8.0)])
        boxes = tile_anchors(grid).reshape(-1, 4)
        centers = {(0.5 * (b[0] + b[2]), 0.5 * (b[1] + b[3])) for b in boxes}
        assert centers == {(4.0, 4.0), (4.0, 12.0), (12.0, 4.0), (12.0, 12.0)}

    def test_nine_anchor_config(self):
        sizes = G.make_anchor_sizes(8, base_factor=2.0, scales=[1.0, 1.26, 1.587],
                                    ratios=[0.5, 1.0, 2.0])
        assert len(sizes) == 9
        grid = AnchorGrid(stride=8, height=3, width=2, sizes=sizes)
        boxes = tile_anchors(grid)
        assert boxes.shape == (3, 2, 9, 4)
        # area tracks the scale, aspect tracks the ratio, per construction
        for k, (h, w) in enumerate(sizes):
            b = boxes[0, 0, k]
            npt.assert_allclose(b[2] - b[0], w, rtol=1e-12)
            npt.assert_allclose(b[3] - b[1], h, rtol=1e-12)
        areas = np.array([(h * w) for h, w in sizes]).reshape(3, 3)
        for row in areas:
            npt.assert_allclose(row / row[0], 1.0, rtol=1e-12)  # ratio keeps area

    def test_count_is_hwa(self):
        grid = AnchorGrid(stride=16, height=4, width=5, sizes=[(10.0, 10.0), (20.0, 10.0)])
        assert tile_anchors(grid).reshape(-1, 4).shape[0] == 4 * 5 * 2


class TestIoU:
    def test_identical(self):
        b = Box(0, 0, 4, 4)
        assert iou(b, b) == 1.0

    def test_disjoint(self):
        assert iou(Box(0, 0, 2, 2), Box(3, 3, 5, 5)) == 0.0

    def test_hand_value(self):
        assert iou(Box(0, 0, 2, 2), Box(1, 0, 3, 2)) == pytest.approx(1 / 3)

    def test_symmetric_and_bounded(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            a = _random_box(rng)
            b = _random_box(rng)
            v = iou(a, b)
            assert 0.0 <= v <= 1.0
            assert v == iou(b, a)
            assert (v == 1.0) == (a == b or a.as_array().tolist() == b.as_array().tolist())

    def test_matrix_matches_scalar(self):
        rng = np.random.default_rng(2)
        boxes_a = np.array([_random_box(rng).as_array() for _ in range(6)])
        boxes_b = np.array([_random_box(rng).as_array() for _ in range(4)])
        mat = G.iou_matrix(boxes_a, boxes_b)
        for i in range(6):
            for j in range(4):
                assert mat[i, j] == pytest.approx(iou(Box(*boxes_a[i]), Box(*boxes_b[j])), abs=1e-12)


def _random_box(rng, lo=0.0, hi=64.0):
    x1, y1 = rng.uniform(lo, hi - 2, size=2)
    w, h = rng.uniform(1, hi - max(x1, y1), size=2) * 0.5 + 0.5
    return Box(x1, y1, x1 + w, y1 + h)


class TestBoxCodec:
    def test_zero_regression_returns_anchor(self):
        anchor = np.array([8.0, 8.0, 24.0, 24.0])
        out = decode_box(anchor, np.zeros(4), ANCHOR_BASED)
        npt.assert_allclose(out, anchor, atol=1e-12)

    def test_anchor_free_hand_case(self):
        point = np.array([9.0, 9.0, 11.0, 11.0])  # centered at (10, 10)
        out = decode_box(point, np.array([2.0, 2.0, 2.0, 2.0]), ANCHOR_FREE, stride=1.0)
        npt.assert_allclose(out, [8.0, 8.0, 12.0, 12.0], atol=1e-12)

    def test_anchor_free_encode_hand_case(self):
        point = np.array([15.0, 15.0, 17.0, 17.0])  # center (16, 16)
        target = np.array([8.0, 12.0, 24.0, 28.0])
        enc = encode_box(point, target, ANCHOR_FREE, stride=8.0)
        npt.assert_allclose(enc, [1.0, 0.5, 1.0, 1.5], atol=1e-12)

    def test_encode_of_anchor_is_zero(self):
        anchor = np.array([4.0, 6.0, 20.0, 30.0])
        enc = encode_box(anchor, anchor, ANCHOR_BASED)
        npt.assert_allclose(enc, np.zeros(4), atol=1e-12)

    @pytest.mark.parametrize("variant", [ANCHOR_BASED, ANCHOR_FREE])
    def test_round_trips(self, variant):
        rng = np.random.default_rng(3)
        for _ in range(100):
            anchor = _random_box(rng).as_array()
            target = _random_box(rng).as_array()
            enc = encode_box(anchor, target, variant, stride=8.0)
            dec = decode_box(anchor, enc, variant, stride=8.0, clamp=False)
            npt.assert_allclose(dec, target, atol=1e-6)
            # and decode -> encode
            reg = rng.normal(size=4) * 0.3 + (0.5 if variant == ANCHOR_FREE else 0.0)
            try:
                dec2 = decode_box(anchor, reg, variant, stride=8.0, clamp=False)
            except G.DegenerateBoxError:
                continue
            enc2 = encode_box(anchor, dec2, variant, stride=8.0)
            npt.assert_allclose(enc2, reg, atol=1e-6)

    def test_degenerate_decode_rejected(self):
        point = np.array([9.0, 9.0, 11.0, 11.0])
        with pytest.raises(G.DegenerateBoxError):
            decode_box(point, np.array([-1.0, 1.0, -1.0, 1.0]), ANCHOR_FREE, stride=1.0, clamp=False)

    def test_nonfinite_regression_rejected(self):
        with pytest.raises(G.GeometryError):
            decode_box(np.array([0.0, 0.0, 8.0, 8.0]), np.array([np.nan, 0, 0, 0]), ANCHOR_BASED)


class TestIndicator:
    def test_centered_target(self):
        # anchor center == target center, 64x64 target, stride 8
        ind = build_indicator((32.0, 32.0), (32.0, 32.0), Box(0, 0, 64, 64), 8.0, ANCHOR_BASED)
        assert ind.shape == (10,)
        rx, ry = ind[4], ind[5]
        assert rx == 0.0 and ry == 0.0
        npt.assert_array_equal(ind[6:], [4.0, 4.0, 4.0, 4.0])

    def test_anchor_block_values(self):
        # 32x32 anchor at stride 8 -> [1/8, 1, 4, 4, ...]
        ind = build_indicator((32.0, 32.0), (32.0, 32.0), Box(0, 0, 64, 64), 8.0, ANCHOR_BASED)
        npt.assert_array_equal(ind[:4], [0.125, 1.0, 4.0, 4.0])

    def test_anchor_free_width(self):
        ind = build_indicator((32.0, 32.0), None, Box(0, 0, 64, 64), 8.0, ANCHOR_FREE)
        assert ind.shape == (7,)
        assert ind[0] == 0.125

    @pytest.mark.parametrize("variant", [ANCHOR_BASED, ANCHOR_FREE])
    def test_sum_identity_exact(self, variant):
        # dyadic-rational geometry keeps every step exact in float64
        rng = np.random.default_rng(4)
        for _ in range(2000):
            s = float(rng.choice([8, 16, 32]))
            ix, iy = rng.integers(0, 8, size=2)
            center = ((ix + 0.5) * s, (iy + 0.5) * s)
            hw = (float(rng.integers(8, 65)), float(rng.integers(8, 65)))
            x1, y1 = rng.integers(0, 256, size=2) / 4.0
            w, h = rng.integers(8, 256, size=2) / 4.0
            target = Box(x1, y1, x1 + w, y1 + h)
            ind = build_indicator(center, hw, target, s, variant)
            off = 6 if variant == ANCHOR_BASED else 3
            pl, pr, pb, pt = ind[off:off + 4]
            assert pl + pr == target.w / s
            assert pt + pb == target.h / s


class TestNms:
    def test_single_box_kept(self):
        assert nms(np.array([[0, 0, 4, 4.0]]), np.array([0.7])) == [0]

    def test_duplicate_suppressed(self):
        boxes = np.array([[0, 0, 4, 4], [0, 0, 4, 4.0]])
        assert nms(boxes, np.array([0.9, 0.8]), iou_threshold=0.5) == [0]

    def test_crafted_pattern_matches_oracle(self):
        boxes = np.array([
            [0, 0, 10, 10],
            [1, 1, 11, 11],
            [20, 20, 30, 30],
            [21, 19, 31, 29],
            [5, 5, 14, 14.0],
        ])
        scores = np.array([0.9, 0.85, 0.8, 0.95, 0.6])
        got = nms(boxes, scores, iou_threshold=0.5)
        assert got == _nms_oracle(boxes, scores, 0.5)

    def test_random_cases_match_oracle(self):
        rng = np.random.default_rng(5)
        for case in range(100):
            n = rng.integers(1, 12)
            boxes = np.array([_random_box(rng, hi=40).as_array() for _ in range(n)])
            scores = rng.uniform(size=n)
            thr = rng.uniform(0.2, 0.7)
            assert nms(boxes, scores, thr) == _nms_oracle(boxes, scores, thr), f"case {case}"

    def test_max_keep(self):
        boxes = np.array([[i * 20, 0, i * 20 + 10, 10.0] for i in range(6)])
        scores = np.linspace(0.9, 0.4, 6)
        assert len(nms(boxes, scores, 0.5, max_keep=3)) == 3

    def test_permutation_invariant_box_set(self):
        rng = np.random.default_rng(6)
        boxes = np.array([_random_box(rng, hi=40).as_array() for _ in range(8)])
        scores = rng.permutation(np.linspace(0.1, 0.9, 8))  # distinct
        kept_boxes = {tuple(boxes[i]) for i in nms(boxes, scores, 0.5)}
        perm = rng.permutation(8)
        kept_perm = {tuple(boxes[perm][i]) for i in nms(boxes[perm], scores[perm], 0.5)}
        assert kept_boxes == kept_perm


def _nms_oracle(boxes, scores, thr):
    # fully independent greedy reimplementation
    remaining = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    kept = []
    while remaining:
        best = remaining.pop(0)
        kept.append(best)
        survivors = []
        for j in remaining:
            xa = max(boxes[best][0], boxes[j][0])
            ya = max(boxes[best][1], boxes[j][1])
            xb = min(boxes[best][2], boxes[j][2])
            yb = min(boxes[best][3], boxes[j][3])
            inter = max(0.0, xb - xa) * max(0.0, yb - ya)
            ua = ((boxes[best][2] - boxes[best][0]) * (boxes[best][3] - boxes[best][1])
                  + (boxes[j][2] - boxes[j][0]) * (boxes[j][3] - boxes[j][1]) - inter)
            if inter / ua <= thr:
                survivors.append(j)
        remaining = survivors
    return kept
