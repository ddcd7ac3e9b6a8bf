"""Procedural scenes with controllable annotation ambiguity.

Each scene renders rectangles into a feature map at grid resolution:
per-class coverage fractions (exact cell/box overlap, so edges carry
sub-stride information) pass through a fixed random channel embedding,
plus pixel noise. Two corruption knobs create ambiguity:

  side_noise_std   per-side Gaussian jitter on the annotation edges; the
                   features still show the clean object, so the labels
                   are noisy relative to what is visible
  occlusion_rate   chance that one edge strip of an object is hidden
                   behind an occluder texture, so the features themselves
                   are ambiguous near that edge

The jittered boxes are the training labels; the clean boxes are kept for
evaluation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..boxes import Box, GridSpec, iou

__all__ = ["SceneConfig", "Scene", "generate_scene", "save_scenes", "load_scenes"]

# Entropy prefix for the channel embedding; shared by every scene of a config.
_EMBED_KEY = 0xE3BED
_MAX_SCENE_ATTEMPTS = 20
_MAX_PLACE_ATTEMPTS = 50
_OCCLUDER_DEPTH = 0.35  # fraction of the object extent hidden along the edge
_MIN_EXTENT = 1.0  # labels never collapse below this many pixels


@dataclass
class SceneConfig:
    image_size: int = 64
    stride: int = 4
    feature_channels: int = 16
    objects_per_scene: tuple[int, int] = (1, 3)
    classes: int = 3
    side_noise_std: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    occlusion_rate: float = 0.0
    min_object_size: float = 10.0
    max_object_size: float = 24.0
    feature_noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.image_size % self.stride != 0:
            raise ValueError("image_size must be divisible by stride")
        if self.classes < 1 or self.feature_channels < 1:
            raise ValueError("classes and feature_channels must be >= 1")
        lo, hi = self.objects_per_scene
        if lo < 0 or hi < lo:
            raise ValueError(f"bad objects_per_scene range: {self.objects_per_scene}")
        if any(s < 0 for s in self.side_noise_std):
            raise ValueError("side_noise_std entries must be >= 0")
        if not 0.0 <= self.occlusion_rate <= 1.0:
            raise ValueError("occlusion_rate must be in [0, 1]")
        if not 0.0 < self.min_object_size <= self.max_object_size:
            raise ValueError("need 0 < min_object_size <= max_object_size")
        if self.max_object_size > self.image_size:
            raise ValueError("max_object_size exceeds the image")

    @property
    def grid(self) -> GridSpec:
        n = self.image_size // self.stride
        return GridSpec(n, n, float(self.stride))


@dataclass
class Scene:
    features: np.ndarray  # [feature_channels, H, W]
    boxes: list[Box]  # jittered annotation boxes (training labels)
    classes: list[int]
    clean_boxes: list[Box]  # noiseless geometry (evaluation oracle)

    def labeled_boxes(self) -> list[tuple[Box, int]]:
        return list(zip(self.boxes, self.classes))


def _coverage(box: Box, grid: GridSpec) -> np.ndarray:
    """Fraction of each grid cell covered by the box, shape [H, W]."""
    s = grid.stride
    xs = np.arange(grid.w, dtype=np.float64) * s
    ys = np.arange(grid.h, dtype=np.float64) * s
    ox = np.clip(np.minimum(xs + s, box.x_rb) - np.maximum(xs, box.x_lt), 0.0, None)
    oy = np.clip(np.minimum(ys + s, box.y_rb) - np.maximum(ys, box.y_lt), 0.0, None)
    return np.outer(oy, ox) / (s * s)


def _embedding(config: SceneConfig) -> np.ndarray:
    """Fixed [feature_channels, classes + 1] mixing matrix; the extra column
    is the occluder texture."""
    rng = np.random.default_rng([_EMBED_KEY, config.feature_channels, config.classes])
    e = rng.normal(0.0, 1.0, size=(config.feature_channels, config.classes + 1))
    return e / np.sqrt(config.classes + 1)


def _place_objects(config: SceneConfig, rng: np.random.Generator) -> list[Box] | None:
    n = int(rng.integers(config.objects_per_scene[0], config.objects_per_scene[1] + 1))
    boxes: list[Box] = []
    for _ in range(n):
        for _ in range(_MAX_PLACE_ATTEMPTS):
            w = rng.uniform(config.min_object_size, config.max_object_size)
            h = rng.uniform(config.min_object_size, config.max_object_size)
            x0 = rng.uniform(0.0, config.image_size - w)
            y0 = rng.uniform(0.0, config.image_size - h)
            cand = Box(x0, y0, x0 + w, y0 + h)
            if all(iou(cand, b) <= 0.3 for b in boxes):
                boxes.append(cand)
                break
        else:
            return None
    return boxes


def _jitter(box: Box, deltas: np.ndarray, image_size: float) -> Box:
    x0 = float(np.clip(box.x_lt + deltas[0], 0.0, image_size))
    x1 = float(np.clip(box.x_rb + deltas[1], 0.0, image_size))
    y0 = float(np.clip(box.y_lt + deltas[2], 0.0, image_size))
    y1 = float(np.clip(box.y_rb + deltas[3], 0.0, image_size))
    x1 = max(x1, x0 + _MIN_EXTENT)
    y1 = max(y1, y0 + _MIN_EXTENT)
    return Box(x0, y0, x1, y1)


def _occluder_strip(box: Box, edge: int) -> Box:
    """Strip of the box hidden behind the occluder; edge 0..3 = l, r, t, b."""
    dx = _OCCLUDER_DEPTH * box.width
    dy = _OCCLUDER_DEPTH * box.height
    if edge == 0:
        return Box(box.x_lt, box.y_lt, box.x_lt + dx, box.y_rb)
    if edge == 1:
        return Box(box.x_rb - dx, box.y_lt, box.x_rb, box.y_rb)
    if edge == 2:
        return Box(box.x_lt, box.y_lt, box.x_rb, box.y_lt + dy)
    return Box(box.x_lt, box.y_rb - dy, box.x_rb, box.y_rb)


def _visible_box(box: Box, edge: int) -> Box:
    strip = _occluder_strip(box, edge)
    if edge == 0:
        return Box(strip.x_rb, box.y_lt, box.x_rb, box.y_rb)
    if edge == 1:
        return Box(box.x_lt, box.y_lt, strip.x_lt, box.y_rb)
    if edge == 2:
        return Box(box.x_lt, strip.y_rb, box.x_rb, box.y_rb)
    return Box(box.x_lt, box.y_lt, box.x_rb, strip.y_lt)


def generate_scene(config: SceneConfig, seed: int) -> Scene:
    """Deterministic scene for (config, seed); the config seed is the dataset
    identity and ``seed`` indexes scenes within it."""
    grid = config.grid
    for attempt in range(_MAX_SCENE_ATTEMPTS):
        rng = np.random.default_rng([config.seed, int(seed), attempt])
        clean = _place_objects(config, rng)
        if clean is not None:
            break
    else:
        raise RuntimeError(f"could not place objects after {_MAX_SCENE_ATTEMPTS} attempts")

    n = len(clean)
    classes = [int(c) for c in rng.integers(0, config.classes, size=n)]
    occluded_edge = [
        int(rng.integers(0, 4)) if rng.random() < config.occlusion_rate else -1 for _ in range(n)
    ]
    deltas = rng.normal(0.0, 1.0, size=(n, 4)) * np.asarray(config.side_noise_std)
    labels = [_jitter(b, deltas[k], float(config.image_size)) for k, b in enumerate(clean)]

    class_cov = np.zeros((config.classes + 1, grid.h, grid.w))
    for k, box in enumerate(clean):
        if occluded_edge[k] >= 0:
            class_cov[classes[k]] += _coverage(_visible_box(box, occluded_edge[k]), grid)
            class_cov[config.classes] += _coverage(_occluder_strip(box, occluded_edge[k]), grid)
        else:
            class_cov[classes[k]] += _coverage(box, grid)

    embed = _embedding(config)
    features = np.tensordot(embed, class_cov, axes=1)
    features += config.feature_noise * rng.normal(size=features.shape)
    return Scene(features=features, boxes=labels, classes=classes, clean_boxes=clean)


def save_scenes(scenes, jsonl_path, blob_path=None) -> None:
    """Scene dataset: JSON lines of geometry plus a float64 LE feature blob."""
    jsonl_path = Path(jsonl_path)
    blob_path = Path(blob_path) if blob_path else jsonl_path.with_suffix(".bin")
    offset = 0
    with open(jsonl_path, "w", encoding="utf-8") as meta, open(blob_path, "wb") as blob:
        for i, scene in enumerate(scenes):
            data = np.ascontiguousarray(scene.features, dtype="<f8").tobytes()
            record = {
                "index": i,
                "classes": scene.classes,
                "boxes": [[b.x_lt, b.y_lt, b.x_rb, b.y_rb] for b in scene.boxes],
                "clean_boxes": [[b.x_lt, b.y_lt, b.x_rb, b.y_rb] for b in scene.clean_boxes],
                "feature_shape": list(scene.features.shape),
                "offset": offset,
            }
            meta.write(json.dumps(record, sort_keys=True))
            meta.write("\n")
            blob.write(data)
            offset += len(data)


def load_scenes(jsonl_path, blob_path=None) -> list[Scene]:
    jsonl_path = Path(jsonl_path)
    blob_path = Path(blob_path) if blob_path else jsonl_path.with_suffix(".bin")
    blob = Path(blob_path).read_bytes()
    scenes: list[Scene] = []
    with open(jsonl_path, "r", encoding="utf-8") as meta:
        for line in meta:
            rec = json.loads(line)
            shape = tuple(rec["feature_shape"])
            count = int(np.prod(shape))
            start = rec["offset"]
            features = np.frombuffer(blob, dtype="<f8", count=count, offset=start).reshape(shape)
            scenes.append(
                Scene(
                    features=features.astype(np.float64).copy(),
                    boxes=[Box(*b) for b in rec["boxes"]],
                    classes=[int(c) for c in rec["classes"]],
                    clean_boxes=[Box(*b) for b in rec["clean_boxes"]],
                )
            )
    return scenes
