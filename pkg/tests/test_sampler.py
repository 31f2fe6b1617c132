"""Sampler: candidate enumeration vs brute force, budgets, patch gather."""
import numpy as np
import numpy.testing as npt
import pytest

from pointmask import geometry as G
from pointmask import sampler as S
from pointmask import tensor as T
from pointmask.config import ModelConfig, SamplerConfig
from pointmask.geometry import ANCHOR_BASED, Box
from pointmask.model import Model
from pointmask.seeding import derive_rng
from pointmask.tensor import Tensor, Tape, backward


def _grids(model, size=64):
    return model.anchor_arrays((size, size))


def small_model():
    cfg = ModelConfig(channels=16, template_channels=9, mask_channels=4, num_classes=2)
    return Model.from_config(cfg, seed=0)


def _candidate_oracle(anchor_arrays, regressed_arrays, gts, cfg):
    out = []
    for lvl, anchors in enumerate(anchor_arrays):
        h, w, a, _ = anchors.shape
        for iy in range(h):
            for ix in range(w):
                for ai in range(a):
                    for gi in range(len(gts)):
                        ga = G.iou(Box(*anchors[iy, ix, ai]), Box(*gts[gi]))
                        hit_a = ga > cfg.iou_anchor
                        regs = regressed_arrays[lvl]
                        if regs is not None:
                            gr = G.iou(Box(*regs[iy, ix, ai]), Box(*gts[gi]))
                            hit_r = gr > cfg.iou_box
                        else:
                            hit_r = False
                        hit = (hit_a or hit_r) if cfg.criterion == "or" else (hit_a and hit_r)
                        if hit:
                            out.append((lvl, iy, ix, ai, gi))
    return out


class TestCandidates:
    def test_anchor_equal_to_gt_is_candidate(self):
        model = small_model()
        anchors = _grids(model)
        gt = anchors[0][3, 3, 4][None, :]
        cands = S.find_positive_candidates(anchors, [None] * 3, gt, SamplerConfig())
        assert any(c.level == 0 and c.iy == 3 and c.ix == 3 and c.anchor == 4 for c in cands)

    def test_no_gts_empty(self):
        model = small_model()
        cands = S.find_positive_candidates(_grids(model), [None] * 3, np.zeros((0, 4)),
                                           SamplerConfig())
        assert cands == []

    @pytest.mark.parametrize("criterion", ["or", "and"])
    def test_matches_brute_force(self, criterion):
        model = small_model()
        anchors = _grids(model)
        rng = np.random.default_rng(0)
        for case in range(100):
            n_gt = rng.integers(1, 4)
            gts = []
            for _ in range(n_gt):
                x1, y1 = rng.uniform(0, 40, size=2)
                w, h = rng.uniform(8, 24, size=2)
                gts.append([x1, y1, x1 + w, y1 + h])
            gts = np.array(gts)
            regs = []
            for lvl, anc in enumerate(anchors):
                jitter = rng.normal(size=anc.shape) * rng.uniform(0, 6)
                r = anc + jitter
                r[..., 2] = np.maximum(r[..., 2], r[..., 0] + 1)
                r[..., 3] = np.maximum(r[..., 3], r[..., 1] + 1)
                regs.append(r)
            cfg = SamplerConfig(criterion=criterion)
            got = S.find_positive_candidates(anchors, regs, gts, cfg)
            want = _candidate_oracle(anchors, regs, gts, cfg)
            assert [(c.level, c.iy, c.ix, c.anchor, c.gt) for c in got] == want, f"case {case}"

    def test_duplicates_across_gts_allowed(self):
        model = small_model()
        anchors = _grids(model)
        gt = anchors[0][3, 3, 4]
        gts = np.stack([gt, gt + np.array([1, 1, 1, 1.0])])
        cands = S.find_positive_candidates(anchors, [None] * 3, gts, SamplerConfig())
        same_pt = [c for c in cands if (c.level, c.iy, c.ix, c.anchor) == (0, 3, 3, 4)]
        assert len(same_pt) == 2


class TestSampling:
    def _scene(self):
        from pointmask import data as D
        return D.generate_scene(D.SceneConfig(), seed=11)

    def _sample(self, cfg, rng_seed=0, budget_all=False):
        model = small_model()
        scene = self._scene()
        anchors = _grids(model)
        cands = S.find_positive_candidates(anchors, [None] * 3, scene.boxes, cfg)
        rng = derive_rng("test-sample", rng_seed)
        recs = S.sample_training_points(
            cands, anchors, [None] * 3, scene.boxes, scene.masks,
            model.cfg.strides, model.cfg.variant, out_res=8, cfg=cfg, rng=rng,
            image_size=64)
        return cands, recs

    def test_under_budget_keeps_all(self):
        cfg = SamplerConfig(budget=10_000)
        cands, recs = self._sample(cfg)
        assert len(recs) == len(cands)

    def test_budget_all_sentinel(self):
        cfg = SamplerConfig(budget=-1)
        cands, recs = self._sample(cfg)
        assert len(recs) == len(cands)

    def test_budget_cap(self):
        cfg = SamplerConfig(budget=3)
        cands, recs = self._sample(cfg)
        if len(cands) >= 3:
            assert len(recs) == 3

    def test_all_gt_ratio_targets_gt(self):
        cfg = SamplerConfig(ratio_anchor=0.0, ratio_gt=1.0, ratio_regressed=0.0)
        _, recs = self._sample(cfg)
        assert recs and all(r.target_type == "gt" for r in recs)

    def test_fixed_seed_reproducible(self):
        cfg = SamplerConfig(budget=5)
        _, a = self._sample(cfg, rng_seed=3)
        _, b = self._sample(cfg, rng_seed=3)
        assert [(r.level, r.iy, r.ix, r.anchor, r.gt, r.target_type) for r in a] == \
               [(r.level, r.iy, r.ix, r.anchor, r.gt, r.target_type) for r in b]

    def test_degenerate_regressed_falls_back_to_gt(self):
        model = small_model()
        scene = self._scene()
        anchors = _grids(model)
        regs = [np.full_like(a, np.inf) for a in anchors]  # all invalid
        cfg = SamplerConfig(ratio_anchor=0.0, ratio_gt=0.0, ratio_regressed=1.0)
        cands = S.find_positive_candidates(anchors, [None] * 3, scene.boxes, cfg)
        rng = derive_rng("fallback", 0)
        with np.errstate(invalid="ignore"):
            recs = S.sample_training_points(cands, anchors, regs, scene.boxes, scene.masks,
                                            model.cfg.strides, model.cfg.variant, 8,
                                            cfg, rng, 64)
        assert recs and all(r.target_type == "gt" for r in recs)

    def test_indicator_built_against_target_box(self):
        cfg = SamplerConfig(ratio_anchor=0.0, ratio_gt=1.0, ratio_regressed=0.0)
        _, recs = self._sample(cfg)
        for r in recs[:10]:
            assert r.indicator.shape == (10,)
            s = r.stride
            assert r.indicator[6] + r.indicator[7] == pytest.approx(r.target_box.w / s)


class TestMaskTarget:
    def test_full_cover_all_ones(self):
        mask = np.ones((32, 32), dtype=np.uint8)
        out = S.build_mask_target(mask, Box(4, 4, 20, 20), out_res=16)
        npt.assert_allclose(out, np.ones((16, 16)))

    def test_empty_mask_all_zero(self):
        out = S.build_mask_target(np.zeros((32, 32), dtype=np.uint8), Box(4, 4, 20, 20), 16)
        npt.assert_array_equal(out, np.zeros((16, 16)))

    def test_box_outside_image_all_zero(self):
        mask = np.ones((32, 32), dtype=np.uint8)
        out = S.build_mask_target(mask, Box(40, 40, 60, 60), 16)
        npt.assert_array_equal(out, np.zeros((16, 16)))

    def test_half_cover_matches_cell_oracle(self):
        mask = np.zeros((32, 32), dtype=np.uint8)
        mask[:, :16] = 1
        box = Box(8, 8, 24, 24)
        got = S.build_mask_target(mask, box, out_res=8)
        want = np.zeros((8, 8))
        from pointmask.maskgen import bilinear_sample_image
        for i in range(8):
            for j in range(8):
                y = box.y1 + (i + 0.5) * box.h / 8
                x = box.x1 + (j + 0.5) * box.w / 8
                want[i, j] = bilinear_sample_image(mask.astype(float),
                                                   np.array([y]), np.array([x]))[0]
        npt.assert_allclose(got, want, atol=1e-12)
        assert got.min() >= 0 and got.max() <= 1


class TestGatherPatches:
    def _records_at(self, model, cells):
        recs = []
        for lvl, iy, ix in cells:
            recs.append(S.SampleRecord(level=lvl, stride=model.cfg.strides[lvl],
                                       iy=iy, ix=ix, anchor=0, gt=0, target_type="gt",
                                       target_box=Box(0, 0, 8, 8),
                                       indicator=np.zeros(10), mask_target=np.zeros((8, 8))))
        return recs

    def test_constant_map_constant_patch(self):
        model = small_model()
        feats = [Tensor(np.full((16, 8, 8), 2.5, dtype=np.float32)),
                 Tensor(np.full((16, 4, 4), 1.5, dtype=np.float32)),
                 Tensor(np.full((16, 2, 2), 0.5, dtype=np.float32))]
        recs = self._records_at(model, [(0, 4, 4)])
        out = S.gather_patches(feats, recs)
        npt.assert_array_equal(out.data, np.full((1, 16, 3, 3), 2.5, dtype=np.float32))

    def test_corner_location_zero_padded(self):
        model = small_model()
        feats = [Tensor(np.ones((16, 8, 8), dtype=np.float32)),
                 Tensor(np.ones((16, 4, 4), dtype=np.float32)),
                 Tensor(np.ones((16, 2, 2), dtype=np.float32))]
        recs = self._records_at(model, [(0, 0, 0)])
        out = S.gather_patches(feats, recs)
        patch = out.data[0, 0]
        assert patch[1:, 1:].sum() == 4  # four real cells
        assert patch[0, :].sum() == 0 and patch[:, 0].sum() == 0  # five padded zeros

    def test_gradient_hits_exactly_source_cells(self):
        model = small_model()
        feats = [Tensor(np.ones((16, 8, 8), dtype=np.float64), requires_grad=True),
                 Tensor(np.ones((16, 4, 4), dtype=np.float64), requires_grad=True),
                 Tensor(np.ones((16, 2, 2), dtype=np.float64), requires_grad=True)]
        recs = self._records_at(model, [(0, 3, 3), (1, 0, 2)])
        with Tape() as tape:
            out = S.gather_patches(feats, recs)
            loss = T.reduce_sum(out)
        backward(tape, loss)
        want0 = np.zeros((16, 8, 8))
        want0[:, 2:5, 2:5] = 1
        npt.assert_array_equal(feats[0].grad, want0)
        want1 = np.zeros((16, 4, 4))
        want1[:, 0:2, 1:4] += 1  # clipped window at the top edge
        npt.assert_array_equal(feats[1].grad, want1)
        assert feats[2].grad is None  # untouched level gets no gradient

    def test_gather_finite_difference(self):
        model = small_model()
        rng = np.random.default_rng(1)
        feats = [Tensor(rng.normal(size=(4, 8, 8)), dtype=np.float64, requires_grad=True),
                 Tensor(rng.normal(size=(4, 4, 4)), dtype=np.float64, requires_grad=True),
                 Tensor(rng.normal(size=(4, 2, 2)), dtype=np.float64, requires_grad=True)]
        recs = self._records_at(model, [(0, 1, 6), (2, 1, 1), (1, 0, 0)])
        f = lambda: T.reduce_sum(T.mul(y := S.gather_patches(feats, recs), y))
        assert T.finite_diff_check(f, feats, eps=1e-5) <= 1e-4


class TestStats:
    def test_positives_per_gt(self):
        assert S.positives_per_gt([], 0) == 0.0
        cands = [S.Candidate(0, 0, 0, 0, 0)] * 9
        assert S.positives_per_gt(cands, 2) == 4.5
