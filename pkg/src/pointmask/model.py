"""The assembled network: pyramid backbone, shared detection head, mask branch."""
from __future__ import annotations

import math

import numpy as np

from . import container
from . import maskgen
from . import tensor as T
from .config import ModelConfig
from .geometry import ANCHOR_FREE, AnchorGrid, make_anchor_sizes, tile_anchors
from .tensor import Tensor


class Model:
    """Owns the parameter registry and the forward wiring.

    Parameter order is fixed by construction, which keeps the optimizer
    state aligned and checkpoints deterministic. The detection head is a
    single parameter set applied to every pyramid level.
    """

    def __init__(self, cfg: ModelConfig, dtype=None):
        self.cfg = cfg
        self.dtype = dtype or T.NARROW
        self.params: dict[str, Tensor] = {}

    # ------------------------------------------------------------------
    # construction

    @classmethod
    def from_config(cls, cfg: ModelConfig, seed: int = 0, dtype=None) -> "Model":
        from .seeding import derive_rng
        model = cls(cfg, dtype=dtype)
        rng = derive_rng("model-init", seed)
        model._build(rng)
        return model

    def _conv_param(self, rng, name, cout, cin, k, std=None, bias=0.0):
        if std is None:
            std = math.sqrt(2.0 / (cin * k * k))
        w = rng.normal(0.0, std, size=(cout, cin, k, k))
        self.params[f"{name}.w"] = Tensor(w.astype(self.dtype), requires_grad=True, dtype=self.dtype)
        b = np.full(cout, bias, dtype=self.dtype)
        self.params[f"{name}.b"] = Tensor(b, requires_grad=True, dtype=self.dtype)

    def _build(self, rng):
        cfg = self.cfg
        c = cfg.channels
        k = cfg.mask_resolution
        e = cfg.template_channels
        b = cfg.mask_channels
        d = cfg.kernel_area
        a = cfg.anchors_per_point
        stem_widths = [(3, c // 4), (c // 4, c // 2), (c // 2, c), (c, c), (c, c)]
        for i, (cin, cout) in enumerate(stem_widths):
            self._conv_param(rng, f"backbone.stem{i}", cout, cin, 3)
        for i in range(3):
            self._conv_param(rng, f"backbone.lateral{i}", c, [c, c, c][i], 1)
        for branch in ("cls", "reg"):
            for i in range(4):
                self._conv_param(rng, f"head.{branch}{i}", c, c, 3)
        from .detector import prior_bias
        self._conv_param(rng, "head.cls_out", a * cfg.num_classes, c, 3, std=0.01,
                         bias=prior_bias(cfg.prior_pi))
        self._conv_param(rng, "head.reg_out", a * 4, c, 3, std=0.01)
        ke = int(math.isqrt(e))
        self._conv_param(rng, "mask.upscale", k * k * e, c, ke)
        u = cfg.indicator_width
        fcw = rng.normal(0.0, math.sqrt(2.0 / u), size=(e * b * d, u))
        self.params["mask.fc.w"] = Tensor(fcw.astype(self.dtype), requires_grad=True, dtype=self.dtype)
        self.params["mask.fc.b"] = Tensor(np.zeros(e * b * d, dtype=self.dtype),
                                          requires_grad=True, dtype=self.dtype)
        for i in range(4):
            self._conv_param(rng, f"head.conv{i}", b, b, 3)
        dw = rng.normal(0.0, math.sqrt(2.0 / b), size=(b, b, 2, 2))
        self.params["head.deconv.w"] = Tensor(dw.astype(self.dtype), requires_grad=True, dtype=self.dtype)
        self._conv_param(rng, "head.out", 1, b, 1)

    # ------------------------------------------------------------------
    # parameter access and persistence

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def parameter_names(self) -> list[str]:
        return list(self.params.keys())

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def save(self, prefix, meta: dict | None = None) -> None:
        container.save_checkpoint(prefix, self.state_dict(), meta=meta)

    def load(self, prefix) -> dict:
        named, meta = container.load_checkpoint(prefix)
        for name, p in self.params.items():
            if name not in named:
                raise container.ContainerError(f"checkpoint missing parameter {name}")
            arr = named[name]
            if tuple(arr.shape) != p.shape:
                raise container.ContainerError(
                    f"checkpoint shape mismatch for {name}: {arr.shape} vs {p.shape}")
            p.data = np.ascontiguousarray(arr, dtype=self.dtype)
        return meta

    # ------------------------------------------------------------------
    # anchors

    def anchor_sizes(self, stride: int) -> list[tuple[float, float]]:
        cfg = self.cfg
        if cfg.variant == ANCHOR_FREE:
            side = cfg.anchor_base_factor * stride
            return [(side, side)]
        return make_anchor_sizes(stride, cfg.anchor_base_factor, cfg.anchor_scales,
                                 cfg.anchor_ratios)

    def anchor_grids(self, image_hw: tuple[int, int]) -> list[AnchorGrid]:
        h, w = image_hw
        return [AnchorGrid(stride=s, height=math.ceil(h / s), width=math.ceil(w / s),
                           sizes=self.anchor_sizes(s)) for s in self.cfg.strides]

    def anchor_arrays(self, image_hw: tuple[int, int]) -> list[np.ndarray]:
        return [tile_anchors(g) for g in self.anchor_grids(image_hw)]

    # ------------------------------------------------------------------
    # forward passes

    def _block(self, x: Tensor, name: str, stride: int = 1, padding: int = 1) -> Tensor:
        return T.relu(T.conv2d(x, self.params[f"{name}.w"], self.params[f"{name}.b"],
                               stride=stride, padding=padding))

    def backbone_forward(self, image: Tensor) -> list[Tensor]:
        """Image (3, H, W) -> one feature map per stride, laterally merged."""
        h, w = image.shape[-2:]
        if h % 32 or w % 32:
            raise T.TensorError(f"image extents must be divisible by 32, got {h}x{w}")
        x = image
        taps = []
        for i in range(5):
            x = self._block(x, f"backbone.stem{i}", stride=2)
            if i >= 2:
                taps.append(x)
        c3, c4, c5 = taps
        p5 = T.conv2d(c5, self.params["backbone.lateral2.w"], self.params["backbone.lateral2.b"])
        p4 = T.add(T.conv2d(c4, self.params["backbone.lateral1.w"], self.params["backbone.lateral1.b"]),
                   T.upsample2x(p5))
        p3 = T.add(T.conv2d(c3, self.params["backbone.lateral0.w"], self.params["backbone.lateral0.b"]),
                   T.upsample2x(p4))
        return [p3, p4, p5]

    def det_head_forward(self, feat: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Shared two-branch head; returns (cls logits, regression, F_last)."""
        cls = feat
        for i in range(4):
            cls = self._block(cls, f"head.cls{i}")
        cls = T.conv2d(cls, self.params["head.cls_out.w"], self.params["head.cls_out.b"], padding=1)
        reg = feat
        for i in range(4):
            reg = self._block(reg, f"head.reg{i}")
        flast = reg
        reg = T.conv2d(reg, self.params["head.reg_out.w"], self.params["head.reg_out.b"], padding=1)
        return cls, reg, flast

    def detection_forward(self, image: Tensor):
        """Per level: (cls logits, regression, F_last)."""
        return [self.det_head_forward(f) for f in self.backbone_forward(image)]

    def flatten_level(self, x: Tensor, per_anchor: int) -> Tensor:
        """(A*per, H, W) -> (H*W*A, per), matching anchor flatten order."""
        a = self.cfg.anchors_per_point
        _, h, w = x.shape
        x = T.reshape(x, (a, per_anchor, h, w))
        x = T.permute(x, (2, 3, 0, 1))
        return T.reshape(x, (h * w * a, per_anchor))

    def mask_forward(self, patches: Tensor, indicators: Tensor) -> Tensor:
        """Patches (P, C, kE, kE) + indicators (P, U) -> logits (P, 2K, 2K)."""
        cfg = self.cfg
        template = maskgen.template_from_patch(
            patches, self.params["mask.upscale.w"], self.params["mask.upscale.b"],
            cfg.template_channels)
        weights = maskgen.weights_from_indicator(
            indicators, self.params["mask.fc.w"], self.params["mask.fc.b"],
            cfg.template_channels, cfg.mask_channels, cfg.kernel_area)
        feature = maskgen.instance_conv(template, weights)
        return maskgen.mask_head(feature, self.params)
