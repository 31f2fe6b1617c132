"""Mask generation chain: shape laws, identity algebra, oracles, gradients."""
import numpy as np
import numpy.testing as npt
import pytest

from pointmask import maskgen as M
from pointmask import tensor as T
from pointmask.config import ModelConfig
from pointmask.geometry import Box
from pointmask.model import Model
from pointmask.tensor import Tensor, finite_diff_check


def wide(arr, requires_grad=False):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=requires_grad)


class TestTemplate:
    def test_desk_scale_shapes(self):
        # C=64, E=9: conv 64 -> 576 channels, kernel 3x3, template (9, 8, 8)
        rng = np.random.default_rng(0)
        patch = wide(rng.normal(size=(64, 3, 3)))
        w = wide(rng.normal(size=(576, 64, 3, 3)) * 0.05)
        b = wide(np.zeros(576))
        out = M.template_from_patch(patch, w, b, template_channels=9)
        assert out.shape == (9, 8, 8)

    def test_full_scale_shape(self):
        # C=256 keeps the K = sqrt(C) tie: template becomes (9, 16, 16)
        rng = np.random.default_rng(1)
        patch = wide(rng.normal(size=(256, 3, 3)))
        w = wide(rng.normal(size=(2304, 256, 3, 3)) * 0.01)
        b = wide(np.zeros(2304))
        out = M.template_from_patch(patch, w, b, template_channels=9)
        assert out.shape == (9, 16, 16)

    def test_zero_patch_zero_template(self):
        patch = wide(np.zeros((16, 3, 3)))
        w = wide(np.random.default_rng(2).normal(size=(144, 16, 3, 3)))
        b = wide(np.zeros(144))
        out = M.template_from_patch(patch, w, b, template_channels=9)
        npt.assert_array_equal(out.data, np.zeros((9, 4, 4)))

    def test_row_major_reshape_semantics(self):
        # output vector index e*K*K + y*K + x lands at template[e, y, x]
        c, e = 16, 4
        k = 4
        patch = wide(np.zeros((c, 2, 2)))
        w = wide(np.zeros((c * e, c, 2, 2)))
        b = wide(np.arange(c * e, dtype=np.float64))
        out = M.template_from_patch(patch, w, b, template_channels=e)
        npt.assert_array_equal(out.data, np.arange(c * e).reshape(e, k, k))

    def test_non_square_channels_rejected(self):
        patch = wide(np.zeros((12, 3, 3)))
        w = wide(np.zeros((108, 12, 3, 3)))
        b = wide(np.zeros(108))
        with pytest.raises(M.MaskGenError):
            M.template_from_patch(patch, w, b, template_channels=9)


class TestDynamicWeights:
    def test_shape_law(self):
        # U=10, E=9, B=16, D=1 -> 144-vector viewed as (16, 9, 1, 1)
        rng = np.random.default_rng(3)
        ind = wide(rng.normal(size=10))
        fw = wide(rng.normal(size=(144, 10)))
        fb = wide(np.zeros(144))
        out = M.weights_from_indicator(ind, fw, fb, 9, 16, 1)
        assert out.shape == (16, 9, 1, 1)
        assert np.all(out.data >= 0)  # post-ReLU

    def test_zero_fc_zero_chain(self):
        ind = wide(np.ones(10))
        fw = wide(np.zeros((144, 10)))
        fb = wide(np.zeros(144))
        wts = M.weights_from_indicator(ind, fw, fb, 9, 16, 1)
        template = wide(np.random.default_rng(4).normal(size=(9, 8, 8)))
        feat = M.instance_conv(template, wts)
        npt.assert_array_equal(feat.data, np.zeros((16, 8, 8)))

    def test_distinct_indicators_distinct_weights(self):
        rng = np.random.default_rng(5)
        fw = wide(rng.normal(size=(144, 10)))
        fb = wide(rng.normal(size=144) * 0.1)
        for _ in range(10):
            a = wide(rng.normal(size=10))
            b = wide(rng.normal(size=10))
            wa = M.weights_from_indicator(a, fw, fb, 9, 16, 1)
            wb = M.weights_from_indicator(b, fw, fb, 9, 16, 1)
            assert not np.array_equal(wa.data, wb.data)

    def test_width_mismatch_rejected(self):
        ind = wide(np.ones(7))
        fw = wide(np.zeros((100, 7)))
        fb = wide(np.zeros(100))
        with pytest.raises(M.MaskGenError):
            M.weights_from_indicator(ind, fw, fb, 9, 16, 1)


class TestInstanceConv:
    def test_identity_weight_is_identity_map(self):
        rng = np.random.default_rng(6)
        e = 9
        template = wide(rng.normal(size=(e, 8, 8)))
        ident = np.eye(e).reshape(e, e, 1, 1)
        out = M.instance_conv(template, wide(ident))
        npt.assert_array_equal(out.data, template.data)  # exact

    def test_zero_weight_zero_feature(self):
        template = wide(np.random.default_rng(7).normal(size=(9, 8, 8)))
        out = M.instance_conv(template, wide(np.zeros((16, 9, 1, 1))))
        npt.assert_array_equal(out.data, np.zeros((16, 8, 8)))

    def test_matches_matrix_vector_oracle(self):
        rng = np.random.default_rng(8)
        template = rng.normal(size=(9, 6, 6))
        weight = rng.normal(size=(5, 9, 1, 1))
        out = M.instance_conv(wide(template), wide(weight))
        want = np.zeros((5, 6, 6))
        for b in range(5):
            for y in range(6):
                for x in range(6):
                    want[b, y, x] = sum(weight[b, e, 0, 0] * template[e, y, x] for e in range(9))
        npt.assert_allclose(out.data, want, atol=1e-12)

    def test_3x3_kernel_matches_loop_oracle(self):
        rng = np.random.default_rng(9)
        template = rng.normal(size=(4, 5, 5))
        weight = rng.normal(size=(3, 4, 3, 3))
        out = M.instance_conv(wide(template), wide(weight))
        tp = np.pad(template, ((0, 0), (1, 1), (1, 1)))
        want = np.zeros((3, 5, 5))
        for b in range(3):
            for y in range(5):
                for x in range(5):
                    acc = 0.0
                    for e in range(4):
                        for u in range(3):
                            for v in range(3):
                                acc += weight[b, e, u, v] * tp[e, y + u, x + v]
                    want[b, y, x] = acc
        npt.assert_allclose(out.data, want, atol=1e-12)

    def test_batched_matches_per_sample(self):
        rng = np.random.default_rng(10)
        templates = rng.normal(size=(4, 9, 6, 6))
        weights = rng.normal(size=(4, 5, 9, 1, 1))
        batch = M.instance_conv(wide(templates), wide(weights))
        for p in range(4):
            one = M.instance_conv(wide(templates[p]), wide(weights[p]))
            npt.assert_allclose(batch.data[p], one.data, atol=1e-12)

    def test_gradients_pass_finite_difference(self):
        rng = np.random.default_rng(11)
        template = wide(rng.normal(size=(4, 4, 4)), requires_grad=True)
        weight = wide(rng.normal(size=(3, 4, 3, 3)), requires_grad=True)
        f = lambda: T.reduce_sum(T.mul(y := M.instance_conv(template, weight), y))
        assert finite_diff_check(f, [template, weight], eps=1e-5) <= 1e-4

    def test_channel_mismatch(self):
        with pytest.raises(M.MaskGenError):
            M.instance_conv(wide(np.zeros((9, 4, 4))), wide(np.zeros((2, 8, 1, 1))))


class TestMaskHead:
    def _head_params(self, b, rng):
        p = {}
        for i in range(4):
            p[f"head.conv{i}.w"] = wide(rng.normal(size=(b, b, 3, 3)) * 0.2, requires_grad=True)
            p[f"head.conv{i}.b"] = wide(np.zeros(b), requires_grad=True)
        p["head.deconv.w"] = wide(rng.normal(size=(b, b, 2, 2)) * 0.2, requires_grad=True)
        p["head.out.w"] = wide(rng.normal(size=(1, b, 1, 1)) * 0.2, requires_grad=True)
        p["head.out.b"] = wide(np.zeros(1), requires_grad=True)
        return p

    def test_doubles_resolution(self):
        rng = np.random.default_rng(12)
        params = self._head_params(6, rng)
        out = M.mask_head(wide(rng.normal(size=(6, 8, 8))), params)
        assert out.shape == (16, 16)

    def test_zero_feature_gives_half_probabilities(self):
        rng = np.random.default_rng(13)
        params = self._head_params(4, rng)
        logits = M.mask_head(wide(np.zeros((4, 8, 8))), params)
        npt.assert_array_equal(logits.data, np.zeros((16, 16)))
        probs = T.sigmoid(logits)
        npt.assert_array_equal(probs.data, np.full((16, 16), 0.5))

    def test_full_chain_finite_difference(self):
        # patch -> template -> weights -> feature -> logits, every parameter group
        cfg = ModelConfig(channels=4, template_channels=9, mask_channels=4,
                          kernel_area=1, num_classes=2)
        model = Model.from_config(cfg, seed=0, dtype=np.float64)
        rng = np.random.default_rng(14)
        patch = Tensor(rng.normal(size=(1, 4, 3, 3)), dtype=np.float64)
        ind = Tensor(rng.normal(size=(1, 10)), dtype=np.float64)
        names = ["mask.upscale.w", "mask.upscale.b", "mask.fc.w", "mask.fc.b",
                 "head.conv0.w", "head.deconv.w", "head.out.w", "head.out.b"]
        params = [model.params[n] for n in names]

        def f():
            logits = model.mask_forward(patch, ind)
            return T.reduce_mean(T.mul(logits, logits))

        assert finite_diff_check(f, params, eps=1e-5) <= 1e-4


class TestInstanceSensitivity:
    def test_distinct_indicators_distinct_features(self):
        cfg = ModelConfig(channels=16, template_channels=9, mask_channels=4, kernel_area=1)
        model = Model.from_config(cfg, seed=1, dtype=np.float64)
        rng = np.random.default_rng(15)
        patch = Tensor(np.repeat(rng.normal(size=(1, 16, 3, 3)), 8, axis=0), dtype=np.float64)
        inds = Tensor(rng.normal(size=(8, 10)), dtype=np.float64)
        from pointmask import maskgen
        template = maskgen.template_from_patch(patch, model.params["mask.upscale.w"],
                                               model.params["mask.upscale.b"], 9)
        weights = maskgen.weights_from_indicator(inds, model.params["mask.fc.w"],
                                                 model.params["mask.fc.b"], 9, 4, 1)
        feats = maskgen.instance_conv(template, weights).data
        for i in range(8):
            for j in range(i + 1, 8):
                assert np.linalg.norm(feats[i] - feats[j]) > 0


class TestPasteMask:
    def test_uniform_one_fills_box(self):
        probs = np.ones((16, 16))
        out = M.paste_mask(probs, Box(4, 8, 20, 24), (32, 32))
        want = np.zeros((32, 32), dtype=bool)
        want[8:24, 4:20] = True
        npt.assert_array_equal(out, want)

    def test_uniform_zero_empty(self):
        out = M.paste_mask(np.zeros((16, 16)), Box(4, 8, 20, 24), (32, 32))
        assert not out.any()

    def test_half_split_matches_pixel_oracle(self):
        g = 16
        probs = np.zeros((g, g))
        probs[:, : g // 2] = 1.0  # left half on
        box = Box(8, 8, 24, 24)
        got = M.paste_mask(probs, box, (32, 32))
        want = np.zeros((32, 32), dtype=bool)
        for r in range(32):
            for c in range(32):
                cx, cy = c + 0.5, r + 0.5
                if not (box.x1 <= cx < box.x2 and box.y1 <= cy < box.y2):
                    continue
                gx = np.clip((cx - box.x1) / box.w * g, 0.5, g - 0.5)
                gy = np.clip((cy - box.y1) / box.h * g, 0.5, g - 0.5)
                val = M.bilinear_sample_image(probs, np.array([gy]), np.array([gx]))[0]
                want[r, c] = val >= 0.5
        npt.assert_array_equal(got, want)

    def test_box_outside_image_empty(self):
        out = M.paste_mask(np.ones((8, 8)), Box(40, 40, 50, 50), (32, 32))
        assert not out.any()

    def test_clipping_partial_box(self):
        out = M.paste_mask(np.ones((8, 8)), Box(-4, -4, 8, 8), (32, 32))
        want = np.zeros((32, 32), dtype=bool)
        want[0:8, 0:8] = True
        npt.assert_array_equal(out, want)


class TestShapeLaw:
    def test_full_scale_element_counts(self):
        # fc width E*B*D = 2304; weights (256, 9, 1, 1); feature B*K^2 = 65536
        cfg = ModelConfig(channels=256, template_channels=9, mask_channels=256,
                          kernel_area=1)
        assert cfg.mask_resolution == 16
        model = Model.from_config(cfg, seed=0)
        assert model.params["mask.fc.w"].shape == (2304, 10)
        rng = np.random.default_rng(16)
        patch = Tensor(rng.normal(size=(256, 3, 3)).astype(np.float32))
        ind = Tensor(rng.normal(size=10).astype(np.float32))
        from pointmask import maskgen
        template = maskgen.template_from_patch(patch, model.params["mask.upscale.w"],
                                               model.params["mask.upscale.b"], 9)
        assert template.shape == (9, 16, 16)
        weights = maskgen.weights_from_indicator(ind, model.params["mask.fc.w"],
                                                 model.params["mask.fc.b"], 9, 256, 1)
        assert weights.shape == (256, 9, 1, 1)
        feature = maskgen.instance_conv(template, weights)
        assert feature.shape == (256, 16, 16)
        assert feature.size == 65536
