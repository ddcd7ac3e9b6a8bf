"""Gaussian offset modeling and the localization losses.

The box offsets (l, r, t, b) are modeled as independent Gaussians with
predicted means mu_k and standard deviations sigma_k. The core loss is the
IoU-powered negative log-likelihood: the Gaussian NLL of the four offsets
scaled by the IoU between the decoded mean box and the ground truth, so a
well-overlapping prediction weighs its likelihood term more. The IoU power
is a fixed per-sample weight; no gradient flows through it.

All losses return engine tensors so gradients reach mu and sigma.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, as_tensor, log, matmul, relu
from .boxes import Box

__all__ = [
    "SIGMA_FLOOR",
    "GaussianOffsets",
    "nll",
    "npll",
    "giou_loss",
    "giou_terms",
]

logger = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-4
TWO_LOG_TWO_PI = 2.0 * math.log(2.0 * math.pi)

_warned_sigma_floor = False


def _floor_sigma(sigma: Tensor) -> Tensor:
    """Clamp sigma to [SIGMA_FLOOR, inf); warn once per run when it binds."""
    global _warned_sigma_floor
    if np.any(sigma.data < SIGMA_FLOOR) and not _warned_sigma_floor:
        logger.warning("sigma below floor %.0e; clamping", SIGMA_FLOOR)
        _warned_sigma_floor = True
    return relu(sigma - SIGMA_FLOOR) + SIGMA_FLOOR


@dataclass
class GaussianOffsets:
    """Predicted offset means (pixels) and standard deviations in (0, 1]."""

    mu: Tensor | np.ndarray
    sigma: Tensor | np.ndarray


def _target_array(target) -> np.ndarray:
    if hasattr(target, "as_array"):
        return target.as_array()
    return np.asarray(target, dtype=np.float64)


def nll(pred: GaussianOffsets, target) -> Tensor:
    """Gaussian negative log-likelihood of the four offsets.

    sum_k [(t_k - mu_k)^2 / (2 sigma_k^2) + 0.5 log sigma_k^2] + 2 log 2pi.
    """
    mu = as_tensor(pred.mu)
    sigma = _floor_sigma(as_tensor(pred.sigma))
    t = _target_array(target)
    resid = t - mu
    var = sigma * sigma
    per_dim = resid * resid / (2.0 * var) + 0.5 * log(var)
    return per_dim.sum() + TWO_LOG_TWO_PI


def npll(pred: GaussianOffsets, target, iou_weight: float) -> Tensor:
    """IoU-powered NLL: the likelihood raised to the IoU, so the loss is
    iou_weight * nll. The weight is a constant; it carries no gradient."""
    w = float(iou_weight)
    if not 0.0 <= w <= 1.0:
        raise ValueError(f"iou_weight must be in [0, 1], got {w}")
    return w * nll(pred, target)


def _pairwise_min(a: Tensor, b) -> Tensor:
    return a - relu(a - b)


def _pairwise_max(a: Tensor, b) -> Tensor:
    return a + relu(as_tensor(b) - a)


def giou_terms(px0, py0, px1, py1, gx0, gy0, gx1, gy1) -> Tensor:
    """Elementwise 1 - GIoU for predicted corner tensors against constants.

    Works on scalars or equal-shape vectors; min/max are built from relu so
    the whole expression is differentiable by the engine.
    """
    px0, py0, px1, py1 = map(as_tensor, (px0, py0, px1, py1))
    iw = relu(_pairwise_min(px1, gx1) - _pairwise_max(px0, gx0))
    ih = relu(_pairwise_min(py1, gy1) - _pairwise_max(py0, gy0))
    inter = iw * ih
    area_p = (px1 - px0) * (py1 - py0)
    area_g = (np.asarray(gx1) - np.asarray(gx0)) * (np.asarray(gy1) - np.asarray(gy0))
    union = area_p + area_g - inter
    ew = _pairwise_max(px1, gx1) - _pairwise_min(px0, gx0)
    eh = _pairwise_max(py1, gy1) - _pairwise_min(py0, gy0)
    enclose = ew * eh
    giou = inter / union - (enclose - union) / enclose
    return 1.0 - giou


def giou_loss(pred_box, gt_box: Box) -> Tensor:
    """1 - GIoU between a predicted box and the ground truth, in [0, 2].

    ``pred_box`` is a Box, a 4-element array, or a 4-element tensor of
    corners (x_lt, y_lt, x_rb, y_rb); tensors keep their gradients.
    """
    if isinstance(pred_box, Box):
        pred_box = pred_box.as_array()
    p = as_tensor(pred_box).reshape((4, 1))
    g = gt_box.as_array()
    # Corner extraction via one-hot matmul keeps the graph in the engine op set.
    e = np.eye(4)
    px0, py0, px1, py1 = (matmul(Tensor(e[i : i + 1]), p).reshape(()) for i in range(4))
    return giou_terms(px0, py0, px1, py1, g[0], g[1], g[2], g[3]).reshape(())
