"""Focal-loss family for quality-aware classification.

Four variants share the structure "positive weight x BCE, down-weighted
negatives":

  fl   hard labels, the class-imbalance baseline
  qfl  positives modulated by |y - p|^gamma, y the IoU soft label
  vfl  positives weighted by the soft label y itself
  ufl  positives weighted by the certainty f(sigma_u) from the
       uncertainty branch; negatives identical to vfl

The certainty function averages (1 - sigma_k) over the four directions.
By default it stays in the gradient path, so the uncertainty branch also
learns from classification; set ``detach_certainty`` to cut that link.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, as_tensor, clamp, log, power

__all__ = [
    "PROB_EPS",
    "FocalConfig",
    "ClassificationSample",
    "certainty",
    "bce",
    "focal_loss",
    "qfl",
    "vfl",
    "ufl",
]

PROB_EPS = 1e-7


@dataclass
class FocalConfig:
    """Shared loss hyperparameters: negative weight, focusing power, NPLL weight."""

    alpha: float = 0.25
    gamma: float = 2.0
    lambda_uc: float = 0.05
    detach_certainty: bool = False

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.gamma < 0.0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if self.lambda_uc < 0.0:
            raise ValueError(f"lambda_uc must be >= 0, got {self.lambda_uc}")


@dataclass
class ClassificationSample:
    """One (location, class) sample: probability p, soft target y, and, for
    positives under ufl, the per-direction uncertainties sigma_u."""

    p: Tensor | float
    y: float
    sigma_u: Tensor | np.ndarray | None = None


def certainty(sigma_u) -> Tensor:
    """f(sigma_u): mean of (1 - sigma_k) over the four directions."""
    s = as_tensor(sigma_u)
    if s.size != 4:
        raise ValueError(f"sigma_u must have 4 entries, got shape {s.shape}")
    if np.any(s.data < 0.0) or np.any(s.data > 1.0):
        raise ValueError("sigma_u entries must lie in [0, 1]")
    return 0.25 * (1.0 - s).sum()


def _clamped_p(p) -> Tensor:
    return clamp(as_tensor(p), PROB_EPS, 1.0 - PROB_EPS)


def bce(p, y: float) -> Tensor:
    """Binary cross-entropy -(y log p + (1-y) log(1-p)) with clamped p."""
    pc = _clamped_p(p)
    return -(y * log(pc) + (1.0 - y) * log(1.0 - pc))


def focal_loss(sample: ClassificationSample, config: FocalConfig) -> Tensor:
    """Standard focal loss; requires hard labels y in {0, 1}."""
    if sample.y not in (0.0, 1.0):
        raise ValueError(f"focal_loss needs a hard label, got y={sample.y}")
    p = _clamped_p(sample.p)
    if sample.y == 1.0:
        return -config.alpha * power(1.0 - p, config.gamma) * log(p)
    return -(1.0 - config.alpha) * power(p, config.gamma) * log(1.0 - p)


def _soft_label(y: float) -> float:
    y = float(y)
    if not 0.0 <= y <= 1.0:
        raise ValueError(f"soft label y must be in [0, 1], got {y}")
    return y


def qfl(sample: ClassificationSample, config: FocalConfig) -> Tensor:
    """Quality focal loss: |y-p|^gamma modulated BCE against the IoU label."""
    y = _soft_label(sample.y)
    p = _clamped_p(sample.p)
    if y > 0.0:
        # |y - p|^gamma as ((y - p)^2)^(gamma/2) keeps it in the op set.
        modulator = power((y - p) * (y - p), config.gamma / 2.0)
        return modulator * bce(p, y)
    return -power(p, config.gamma) * log(1.0 - p)


def vfl(sample: ClassificationSample, config: FocalConfig) -> Tensor:
    """Varifocal loss: positives weighted by the soft label itself."""
    y = _soft_label(sample.y)
    p = _clamped_p(sample.p)
    if y > 0.0:
        return y * bce(p, y)
    return -config.alpha * power(p, config.gamma) * log(1.0 - p)


def ufl(sample: ClassificationSample, config: FocalConfig) -> Tensor:
    """Uncertainty-aware focal loss: positives weighted by f(sigma_u)."""
    y = _soft_label(sample.y)
    p = _clamped_p(sample.p)
    if y > 0.0:
        if sample.sigma_u is None:
            raise ValueError("positive ufl sample requires sigma_u")
        weight = certainty(sample.sigma_u)
        if config.detach_certainty:
            weight = weight.detach()
        return weight * bce(p, y)
    return -config.alpha * power(p, config.gamma) * log(1.0 - p)
