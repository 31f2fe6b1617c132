"""Run configuration: one JSON document validated before any side effect."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .geometry import ANCHOR_BASED, ANCHOR_FREE, INDICATOR_WIDTH

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Invalid configuration; message carries field-path diagnostics."""


@dataclass
class ModelConfig:
    channels: int = 64                    # C; template resolution K = sqrt(C)
    template_channels: int = 9            # E
    mask_channels: int = 16               # B
    kernel_area: int = 1                  # D
    variant: str = ANCHOR_BASED
    strides: list[int] = field(default_factory=lambda: [8, 16, 32])
    num_classes: int = 2
    anchor_base_factor: float = 2.0       # anchor side = factor * stride * scale
    anchor_scales: list[float] = field(default_factory=lambda: [1.0, 1.3, 1.6])
    anchor_ratios: list[float] = field(default_factory=lambda: [0.5, 1.0, 2.0])
    prior_pi: float = 0.01

    @property
    def mask_resolution(self) -> int:     # K
        return int(math.isqrt(self.channels))

    @property
    def anchors_per_point(self) -> int:   # A
        if self.variant == ANCHOR_FREE:
            return 1
        return len(self.anchor_scales) * len(self.anchor_ratios)

    @property
    def indicator_width(self) -> int:     # U
        return INDICATOR_WIDTH[self.variant]

    def validate(self) -> list[str]:
        errs = []
        k = math.isqrt(self.channels)
        if k * k != self.channels:
            errs.append("model.channels: must be a perfect square (K = sqrt(C))")
        e = math.isqrt(self.template_channels)
        if e * e != self.template_channels:
            errs.append("model.template_channels: must be a perfect square")
        d = math.isqrt(self.kernel_area)
        if d * d != self.kernel_area or d % 2 != 1:
            errs.append("model.kernel_area: must be an odd perfect square")
        if self.mask_channels < 1:
            errs.append("model.mask_channels: must be positive")
        if self.variant not in (ANCHOR_BASED, ANCHOR_FREE):
            errs.append(f"model.variant: unknown variant {self.variant!r}")
        if not self.strides or any(s <= 0 for s in self.strides):
            errs.append("model.strides: need positive strides")
        if self.num_classes < 1:
            errs.append("model.num_classes: must be positive")
        if not (0 < self.prior_pi < 1):
            errs.append("model.prior_pi: must lie in (0, 1)")
        if self.variant == ANCHOR_BASED and (not self.anchor_scales or not self.anchor_ratios):
            errs.append("model.anchor_scales/anchor_ratios: must be non-empty")
        return errs


@dataclass
class SamplerConfig:
    budget: int = 128                     # "all" is encoded as -1
    iou_anchor: float = 0.5
    iou_box: float = 0.5
    ratio_anchor: float = 0.05
    ratio_gt: float = 0.05
    ratio_regressed: float = 0.9
    criterion: str = "or"                 # "and" reproduces the joint-threshold reading

    def validate(self) -> list[str]:
        errs = []
        if self.budget == 0 or self.budget < -1:
            errs.append("sampler.budget: must be positive or -1 for all")
        for name in ("iou_anchor", "iou_box"):
            v = getattr(self, name)
            if not (0 < v < 1):
                errs.append(f"sampler.{name}: must lie in (0, 1)")
        ratios = (self.ratio_anchor, self.ratio_gt, self.ratio_regressed)
        if any(r < 0 for r in ratios):
            errs.append("sampler.ratio_*: ratios must be non-negative")
        if abs(sum(ratios) - 1.0) > 1e-9:
            errs.append("sampler.ratio_*: ratios must sum to 1")
        if self.criterion not in ("or", "and"):
            errs.append("sampler.criterion: must be 'or' or 'and'")
        return errs


@dataclass
class LossConfig:
    lambda_det: float = 1.0
    lambda_mask: float = 2.0
    edge_weight: float = 4.0
    edge_neighborhood: int = 4
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    smooth_l1_beta: float = 1.0
    match_pos_iou: float = 0.5
    match_neg_iou: float = 0.4
    force_match: bool = True

    def validate(self) -> list[str]:
        errs = []
        for name in ("lambda_det", "lambda_mask", "edge_weight"):
            if getattr(self, name) <= 0:
                errs.append(f"loss.{name}: must be positive")
        if self.edge_neighborhood not in (4, 8):
            errs.append("loss.edge_neighborhood: must be 4 or 8")
        if not (0 < self.match_neg_iou <= self.match_pos_iou < 1):
            errs.append("loss.match_pos_iou/match_neg_iou: need 0 < neg <= pos < 1")
        return errs


@dataclass
class OptimizerConfig:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    steps: int = 2000
    batch_size: int = 1
    decay_factor: float = 0.1
    decay_at: list[float] = field(default_factory=lambda: [0.7, 0.9])
    checkpoint_every: int = 1000

    def validate(self) -> list[str]:
        errs = []
        if self.lr < 0:
            errs.append("optimizer.lr: must be non-negative")
        if self.steps < 1:
            errs.append("optimizer.steps: must be positive")
        if self.batch_size < 1:
            errs.append("optimizer.batch_size: must be positive")
        if any(not (0 < f <= 1) for f in self.decay_at):
            errs.append("optimizer.decay_at: fractions must lie in (0, 1]")
        return errs


@dataclass
class DataConfig:
    image_size: int = 64
    train_scenes: int = 500
    eval_scenes: int = 100
    seed: int = 0
    min_instances: int = 1
    max_instances: int = 3
    min_side: int = 12
    max_side: int = 36
    noise: float = 0.04

    def validate(self) -> list[str]:
        errs = []
        if self.image_size % 32 != 0:
            errs.append("data.image_size: must be divisible by 32")
        if self.train_scenes < 1 or self.eval_scenes < 1:
            errs.append("data.train_scenes/eval_scenes: must be positive")
        if not (1 <= self.min_instances <= self.max_instances):
            errs.append("data.min_instances/max_instances: need 1 <= min <= max")
        if not (4 <= self.min_side <= self.max_side <= self.image_size):
            errs.append("data.min_side/max_side: need 4 <= min <= max <= image_size")
        return errs


@dataclass
class EvalConfig:
    score_threshold: float = 0.05
    nms_iou: float = 0.5
    pre_nms_topk: int = 400
    max_detections: int = 100
    mask_threshold: float = 0.5

    def validate(self) -> list[str]:
        errs = []
        if not (0 <= self.score_threshold < 1):
            errs.append("eval.score_threshold: must lie in [0, 1)")
        if not (0 < self.nms_iou < 1):
            errs.append("eval.nms_iou: must lie in (0, 1)")
        if self.max_detections < 1:
            errs.append("eval.max_detections: must be positive")
        return errs


@dataclass
class BenchConfig:
    sample_points: int = 128
    repetitions: int = 5
    point_sweep: list[int] = field(default_factory=lambda: [32, 64, 128])
    bench_scenes: int = 8

    def validate(self) -> list[str]:
        errs = []
        if self.sample_points < 1:
            errs.append("bench.sample_points: must be positive")
        if self.repetitions < 1:
            errs.append("bench.repetitions: must be positive")
        if any(p < 1 for p in self.point_sweep):
            errs.append("bench.point_sweep: entries must be positive")
        return errs


_SECTIONS = {
    "model": ModelConfig,
    "sampler": SamplerConfig,
    "loss": LossConfig,
    "optimizer": OptimizerConfig,
    "data": DataConfig,
    "eval": EvalConfig,
    "bench": BenchConfig,
}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    schema_version: int = SCHEMA_VERSION

    def validate(self) -> list[str]:
        errs = []
        if self.schema_version != SCHEMA_VERSION:
            errs.append(f"schema_version: expected {SCHEMA_VERSION}")
        for name, section in _SECTIONS.items():
            errs.extend(getattr(self, name).validate())
        return errs

    def require_valid(self) -> "RunConfig":
        errs = self.validate()
        if errs:
            raise ConfigError("invalid config:\n  " + "\n  ".join(errs))
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        kwargs = {}
        for name, section_cls in _SECTIONS.items():
            body = doc.get(name, {})
            known = {f for f in section_cls.__dataclass_fields__}
            extra = set(body) - known
            if extra:
                raise ConfigError(f"{name}.{sorted(extra)[0]}: unknown field")
            kwargs[name] = section_cls(**body)
        return cls(schema_version=doc.get("schema_version", SCHEMA_VERSION), **kwargs)

    @classmethod
    def from_json(cls, path: str | Path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]
