"""Decode head outputs into scored candidates and suppress duplicates.

Scoring modes mirror the box-quality strategies under comparison:

  uncertainty_aware   sigmoid(cls_logit) as-is; certainty was already fused
                      into the logits by the CRN during the forward pass
  centerness_product  sigmoid(cls_logit) times the centerness branch
  iou_branch_product  sigmoid(cls_logit) times the IoU branch
  raw_classification  sigmoid(cls_logit) from a head without fusion

NMS is greedy and per-class; ties on score break on the lower location
index so runs are reproducible.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass

import numpy as np

from .boxes import Box, GridSpec, iou_arrays

__all__ = ["ScoringMode", "DetectionCandidate", "decode", "nms", "dump_detections"]


class ScoringMode(enum.Enum):
    UNCERTAINTY_AWARE = "uncertainty_aware"
    CENTERNESS_PRODUCT = "centerness_product"
    IOU_BRANCH_PRODUCT = "iou_branch_product"
    RAW_CLASSIFICATION = "raw_classification"


@dataclass
class DetectionCandidate:
    box: Box
    class_id: int
    score: float
    certainty4: tuple[float, float, float, float]  # (C_L, C_R, C_T, C_B)
    location_index: int = 0

    def sigma(self) -> np.ndarray:
        return 1.0 - np.array(self.certainty4, dtype=np.float64)


def _as_array(x) -> np.ndarray:
    return x.data if hasattr(x, "data") else np.asarray(x, dtype=np.float64)


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def decode(
    head_output,
    grid: GridSpec,
    score_threshold: float = 0.05,
    mode: ScoringMode = ScoringMode.UNCERTAINTY_AWARE,
) -> list[DetectionCandidate]:
    """Turn per-location predictions into thresholded candidates."""
    logits = _as_array(head_output.cls_logits)
    mu = _as_array(head_output.mu)
    sigma = _as_array(head_output.sigma)

    if mode is ScoringMode.UNCERTAINTY_AWARE and not head_output.crn_fused:
        raise ValueError("uncertainty_aware scoring requires a CRN-fused head")
    if mode is ScoringMode.CENTERNESS_PRODUCT and head_output.quality_kind != "centerness":
        raise ValueError("centerness_product scoring requires a centerness branch")
    if mode is ScoringMode.IOU_BRANCH_PRODUCT and head_output.quality_kind != "iou":
        raise ValueError("iou_branch_product scoring requires an IoU branch")

    scores = _stable_sigmoid(logits)
    if mode in (ScoringMode.CENTERNESS_PRODUCT, ScoringMode.IOU_BRANCH_PRODUCT):
        scores = scores * _as_array(head_output.quality)

    cx, cy = grid.centers()
    x0 = cx - mu[0]
    x1 = cx + mu[1]
    y0 = cy - mu[2]
    y1 = cy + mu[3]
    cert = 1.0 - sigma

    out: list[DetectionCandidate] = []
    num_classes = scores.shape[0]
    for cls in range(num_classes):
        keep = scores[cls] > score_threshold
        for i, j in zip(*np.nonzero(keep)):
            out.append(
                DetectionCandidate(
                    box=Box(float(x0[i, j]), float(y0[i, j]), float(x1[i, j]), float(y1[i, j])),
                    class_id=cls,
                    score=float(scores[cls, i, j]),
                    certainty4=(
                        float(cert[0, i, j]),
                        float(cert[1, i, j]),
                        float(cert[2, i, j]),
                        float(cert[3, i, j]),
                    ),
                    location_index=int(i * grid.w + j),
                )
            )
    return out


def _candidate_order(c: DetectionCandidate):
    return (-c.score, c.location_index, c.class_id)


def nms(candidates, iou_threshold: float = 0.6) -> list[DetectionCandidate]:
    """Greedy per-class suppression; output sorted by descending score."""
    kept: list[DetectionCandidate] = []
    kept_arrays: list[np.ndarray] = []
    for cand in sorted(candidates, key=_candidate_order):
        arr = cand.box.as_array()
        suppressed = False
        for other, other_arr in zip(kept, kept_arrays):
            if other.class_id != cand.class_id:
                continue
            if float(iou_arrays(arr, other_arr)) >= iou_threshold:
                suppressed = True
                break
        if not suppressed:
            kept.append(cand)
            kept_arrays.append(arr)
    return kept


def dump_detections(candidates, path) -> None:
    """One JSON object per line: box, class, score, certainty4."""
    with open(path, "w", encoding="utf-8") as fh:
        for c in candidates:
            fh.write(
                json.dumps(
                    {
                        "box": [c.box.x_lt, c.box.y_lt, c.box.x_rb, c.box.y_rb],
                        "class_id": c.class_id,
                        "score": c.score,
                        "certainty4": list(c.certainty4),
                    },
                    sort_keys=True,
                )
            )
            fh.write("\n")
