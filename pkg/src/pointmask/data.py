"""Deterministic synthetic scenes: shapes on textured backgrounds.

Class 0 is a rectangle, class 1 an ellipse. Masks are exact (pixel-center
rasterization, no anti-aliasing) and pairwise disjoint, so loss and AP
oracles have exact targets. Every instance box is the tight bounding box
of its mask.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import container
from .seeding import derive_rng

GENERATOR_VERSION = 1
CLASS_NAMES = ["rectangle", "ellipse"]


class DataError(ValueError):
    pass


@dataclass
class SceneConfig:
    image_size: int = 64
    min_instances: int = 1
    max_instances: int = 3
    min_side: int = 12
    max_side: int = 36
    noise: float = 0.04
    max_retries: int = 200

    def validate(self) -> list[str]:
        errs = []
        if self.image_size % 32 != 0:
            errs.append("image_size: must be divisible by 32")
        if not (1 <= self.min_instances <= self.max_instances):
            errs.append("min_instances/max_instances: need 1 <= min <= max")
        if not (4 <= self.min_side <= self.max_side <= self.image_size):
            errs.append("min_side/max_side: need 4 <= min <= max <= image_size")
        return errs


@dataclass
class SyntheticScene:
    image: np.ndarray                 # (3, H, W) float32 in [0, 1]
    classes: list[int]
    boxes: np.ndarray                 # (N, 4) float64, tight around masks
    masks: np.ndarray                 # (N, H, W) uint8
    seed: int = 0


def _tight_box(mask: np.ndarray) -> np.ndarray:
    ys, xs = np.nonzero(mask)
    return np.array([xs.min(), ys.min(), xs.max() + 1, ys.max() + 1], dtype=np.float64)


def _rasterize(kind: int, rng: np.random.Generator, cfg: SceneConfig) -> np.ndarray:
    size = cfg.image_size
    if kind == 0:
        w = int(rng.integers(cfg.min_side, cfg.max_side + 1))
        h = int(rng.integers(cfg.min_side, cfg.max_side + 1))
        x1 = int(rng.integers(0, size - w + 1))
        y1 = int(rng.integers(0, size - h + 1))
        mask = np.zeros((size, size), dtype=np.uint8)
        mask[y1:y1 + h, x1:x1 + w] = 1
        return mask
    rx = rng.uniform(cfg.min_side / 2, cfg.max_side / 2)
    ry = rng.uniform(cfg.min_side / 2, cfg.max_side / 2)
    cx = rng.uniform(rx, size - rx)
    cy = rng.uniform(ry, size - ry)
    yy, xx = np.mgrid[0:size, 0:size]
    # pixel centers at (r + 0.5, c + 0.5)
    inside = (((xx + 0.5 - cx) / rx) ** 2 + ((yy + 0.5 - cy) / ry) ** 2) <= 1.0
    return inside.astype(np.uint8)


def generate_scene(cfg: SceneConfig, seed: int) -> SyntheticScene:
    errs = cfg.validate()
    if errs:
        raise DataError("; ".join(errs))
    rng = derive_rng("scene", GENERATOR_VERSION, seed)
    size = cfg.image_size

    base = rng.uniform(0.08, 0.25, size=3)
    image = base[:, None, None] + rng.uniform(-cfg.noise, cfg.noise, size=(3, size, size))
    image = np.clip(image, 0.0, 1.0)

    n_inst = int(rng.integers(cfg.min_instances, cfg.max_instances + 1))
    occupied = np.zeros((size, size), dtype=bool)
    classes: list[int] = []
    masks = []
    boxes = []
    for _ in range(n_inst):
        kind = int(rng.integers(0, len(CLASS_NAMES)))
        placed = False
        for _ in range(cfg.max_retries):
            mask = _rasterize(kind, rng, cfg)
            if not mask.any():
                continue
            if (mask.astype(bool) & occupied).any():
                continue
            placed = True
            break
        if not placed:
            raise DataError(f"could not place instance after {cfg.max_retries} retries")
        occupied |= mask.astype(bool)
        # each class gets its own colour band so the tiny detector has a chance
        if kind == 0:
            fill = np.array([rng.uniform(0.7, 0.95), rng.uniform(0.35, 0.55), rng.uniform(0.1, 0.3)])
        else:
            fill = np.array([rng.uniform(0.1, 0.3), rng.uniform(0.35, 0.55), rng.uniform(0.7, 0.95)])
        image[:, mask.astype(bool)] = fill[:, None]
        classes.append(kind)
        masks.append(mask)
        boxes.append(_tight_box(mask))

    return SyntheticScene(
        image=image.astype(np.float32),
        classes=classes,
        boxes=np.stack(boxes),
        masks=np.stack(masks),
        seed=seed,
    )


@dataclass
class DatasetManifest:
    generator_version: int
    image_size: int
    class_names: list[str]
    count: int
    seeds: list[int]
    scene_config: dict = field(default_factory=dict)


def make_dataset(cfg: SceneConfig, count: int, base_seed: int) -> list[SyntheticScene]:
    scenes = []
    for i in range(count):
        scenes.append(generate_scene(cfg, seed=base_seed * 1_000_003 + i))
    return scenes


def save_dataset(scenes: list[SyntheticScene], path: str | Path,
                 scene_config: SceneConfig | None = None) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "generator_version": GENERATOR_VERSION,
        "image_size": int(scenes[0].image.shape[-1]),
        "class_names": CLASS_NAMES,
        "count": len(scenes),
        "seeds": [s.seed for s in scenes],
        "scene_config": vars(scene_config) if scene_config else {},
    }
    with open(path / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1)
    container.write_tensors(path / "images.ptns", [s.image for s in scenes])
    container.write_tensors(path / "masks.ptns", [s.masks for s in scenes])
    boxes = [{"classes": s.classes, "boxes": s.boxes.tolist()} for s in scenes]
    with open(path / "boxes.json", "w") as fh:
        json.dump(boxes, fh)


def load_dataset(path: str | Path) -> list[SyntheticScene]:
    path = Path(path)
    with open(path / "manifest.json") as fh:
        manifest = json.load(fh)
    if manifest["generator_version"] != GENERATOR_VERSION:
        raise DataError(f"generator version mismatch: {manifest['generator_version']}")
    images = container.read_tensors(path / "images.ptns", count=manifest["count"])
    masks = container.read_tensors(path / "masks.ptns", count=manifest["count"])
    with open(path / "boxes.json") as fh:
        boxes = json.load(fh)
    scenes = []
    for img, msk, meta, seed in zip(images, masks, boxes, manifest["seeds"]):
        scenes.append(SyntheticScene(
            image=img, classes=list(meta["classes"]),
            boxes=np.asarray(meta["boxes"], dtype=np.float64),
            masks=msk, seed=seed,
        ))
    return scenes
