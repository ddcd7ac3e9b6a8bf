"""Axis-aligned boxes, LTRB offset targets, IoU/GIoU and rasterized oracles.

Coordinates are continuous (sub-pixel) image-space reals. A box stores its
left-top and right-bottom corners; offsets are the four distances from a
location to the box sides.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Box",
    "OffsetTarget",
    "GridSpec",
    "offsets_from_box",
    "box_from_offsets",
    "iou",
    "giou",
    "iou_arrays",
    "giou_arrays",
    "rasterized_iou",
    "rasterized_giou",
]


def _require_finite(name: str, *values: float) -> None:
    for v in values:
        if not math.isfinite(v):
            raise ValueError(f"non-finite value in {name}")


@dataclass(frozen=True)
class Box:
    """Rectangle given by left-top (x_lt, y_lt) and right-bottom (x_rb, y_rb)."""

    x_lt: float
    y_lt: float
    x_rb: float
    y_rb: float

    def __post_init__(self):
        _require_finite("Box", self.x_lt, self.y_lt, self.x_rb, self.y_rb)
        if self.x_lt > self.x_rb or self.y_lt > self.y_rb:
            raise ValueError(f"degenerate box: {self}")

    @property
    def width(self) -> float:
        return self.x_rb - self.x_lt

    @property
    def height(self) -> float:
        return self.y_rb - self.y_lt

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_array(self) -> np.ndarray:
        return np.array([self.x_lt, self.y_lt, self.x_rb, self.y_rb], dtype=np.float64)

    def translate(self, dx: float, dy: float) -> "Box":
        return Box(self.x_lt + dx, self.y_lt + dy, self.x_rb + dx, self.y_rb + dy)


@dataclass(frozen=True)
class OffsetTarget:
    """Distances (l, r, t, b) from a location to the four box sides."""

    l: float
    r: float
    t: float
    b: float

    def __post_init__(self):
        _require_finite("OffsetTarget", self.l, self.r, self.t, self.b)

    def as_array(self) -> np.ndarray:
        return np.array([self.l, self.r, self.t, self.b], dtype=np.float64)


@dataclass(frozen=True)
class GridSpec:
    """Single-level prediction grid: H x W cells, ``stride`` pixels per cell."""

    h: int
    w: int
    stride: float

    def __post_init__(self):
        if self.h < 1 or self.w < 1 or self.stride < 1:
            raise ValueError(f"invalid grid: {self}")

    def centers(self) -> tuple[np.ndarray, np.ndarray]:
        """(cx, cy) arrays of shape [H, W]; cell centers at (i+0.5)*stride."""
        xs = (np.arange(self.w, dtype=np.float64) + 0.5) * self.stride
        ys = (np.arange(self.h, dtype=np.float64) + 0.5) * self.stride
        cx, cy = np.meshgrid(xs, ys)
        return cx, cy


def offsets_from_box(location: tuple[float, float], gt: Box) -> OffsetTarget:
    """Regression target at a location: signed distances to the box sides."""
    x, y = location
    _require_finite("location", x, y)
    return OffsetTarget(x - gt.x_lt, gt.x_rb - x, y - gt.y_lt, gt.y_rb - y)


def box_from_offsets(location: tuple[float, float], offsets: OffsetTarget) -> Box:
    """Inverse target transform; exact roundtrip with offsets_from_box."""
    x, y = location
    _require_finite("location", x, y)
    if offsets.l + offsets.r < 0 or offsets.t + offsets.b < 0:
        raise ValueError(f"offsets decode to a negative-extent box: {offsets}")
    return Box(x - offsets.l, y - offsets.t, x + offsets.r, y + offsets.b)


def iou_arrays(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise IoU of boxes stored as [..., 4] (x_lt, y_lt, x_rb, y_rb)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    iw = np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0])
    ih = np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1])
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    union = area_a + area_b - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0.0, inter / np.where(union > 0.0, union, 1.0), 0.0)
    # Identical zero-area boxes count as a perfect match.
    same = np.all(a == b, axis=-1)
    return np.where((union == 0.0) & same, 1.0, out)


def giou_arrays(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise generalized IoU with the enclosing-box penalty."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    base = iou_arrays(a, b)
    iw = np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0])
    ih = np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1])
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    union = area_a + area_b - inter
    ew = np.maximum(a[..., 2], b[..., 2]) - np.minimum(a[..., 0], b[..., 0])
    eh = np.maximum(a[..., 3], b[..., 3]) - np.minimum(a[..., 1], b[..., 1])
    enclose = ew * eh
    with np.errstate(invalid="ignore", divide="ignore"):
        penalty = np.where(enclose > 0.0, (enclose - union) / np.where(enclose > 0.0, enclose, 1.0), 0.0)
    return base - penalty


def iou(a: Box, b: Box) -> float:
    """Intersection over union; 0 when disjoint, 1 for identical boxes."""
    return float(iou_arrays(a.as_array(), b.as_array()))


def giou(a: Box, b: Box) -> float:
    """IoU minus (enclosing area - union) / enclosing area; range [-1, 1]."""
    return float(giou_arrays(a.as_array(), b.as_array()))


def _raster_masks(a: Box, b: Box, resolution: float):
    """Membership masks of both boxes and their enclosing box on a fine grid."""
    x0 = min(a.x_lt, b.x_lt) - resolution
    x1 = max(a.x_rb, b.x_rb) + resolution
    y0 = min(a.y_lt, b.y_lt) - resolution
    y1 = max(a.y_rb, b.y_rb) + resolution
    xs = np.arange(x0 + resolution / 2, x1, resolution)
    ys = np.arange(y0 + resolution / 2, y1, resolution)
    gx, gy = np.meshgrid(xs, ys)
    in_a = (gx >= a.x_lt) & (gx <= a.x_rb) & (gy >= a.y_lt) & (gy <= a.y_rb)
    in_b = (gx >= b.x_lt) & (gx <= b.x_rb) & (gy >= b.y_lt) & (gy <= b.y_rb)
    ex0, ex1 = min(a.x_lt, b.x_lt), max(a.x_rb, b.x_rb)
    ey0, ey1 = min(a.y_lt, b.y_lt), max(a.y_rb, b.y_rb)
    in_e = (gx >= ex0) & (gx <= ex1) & (gy >= ey0) & (gy <= ey1)
    return in_a, in_b, in_e


def rasterized_iou(a: Box, b: Box, resolution: float = 0.25) -> float:
    """Pixel-counting IoU oracle: sample a fine grid and count memberships."""
    in_a, in_b, _ = _raster_masks(a, b, resolution)
    inter = np.count_nonzero(in_a & in_b)
    union = np.count_nonzero(in_a | in_b)
    if union == 0:
        return 1.0 if a == b else 0.0
    return inter / union


def rasterized_giou(a: Box, b: Box, resolution: float = 0.25) -> float:
    """Pixel-counting GIoU oracle using the same sampled grid."""
    in_a, in_b, in_e = _raster_masks(a, b, resolution)
    inter = np.count_nonzero(in_a & in_b)
    union = np.count_nonzero(in_a | in_b)
    enclose = np.count_nonzero(in_e)
    if union == 0 or enclose == 0:
        return 1.0 if a == b else 0.0
    return inter / union - (enclose - union) / enclose
