"""Gradient-check battery over every loss, the CRN, and the full head.

Each target draws seeded random probe points away from clamp boundaries
and compares the engine gradient against central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .assign import assign
from .autodiff import GradCheckFailure, Tensor, grad_check_report
from .bench.training import TrainConfig, scene_losses
from .boxes import Box
from .cls_losses import ClassificationSample, FocalConfig, fl_targets_note  # noqa: F401
from .cls_losses import focal_loss, qfl, ufl, vfl
from .head import DetectionHead, HeadConfig, crn
from .loc_losses import GaussianOffsets, giou_loss, nll, npll

__all__ = ["TargetResult", "GRADCHECK_TARGETS", "run_gradcheck"]

LOSS_TOLERANCE = 1e-4
HEAD_TOLERANCE = 1e-3
FD_STEP = 1e-5


@dataclass
class TargetResult:
    name: str
    n_probes: int
    max_rel_error: float
    tolerance: float
    failed_probe: int | None = None  # probe index of a non-finite evaluation
    failed_coordinate: int | None = None

    @property
    def passed(self) -> bool:
        return self.failed_probe is None and self.max_rel_error <= self.tolerance


def _rng(seed: int, name: str, probe: int) -> np.random.Generator:
    return np.random.default_rng([seed, hash(name) & 0xFFFF, probe])


def _random_box(rng, lo=0.0, hi=40.0) -> Box:
    x0, y0 = rng.uniform(lo, hi - 8, size=2)
    w, h = rng.uniform(4.0, 8.0, size=2)
    return Box(x0, y0, x0 + w, y0 + h)


def _probe_nll(seed, probe):
    rng = _rng(seed, "nll", probe)
    mu = Tensor(rng.uniform(0.0, 10.0, size=4))
    sigma = Tensor(rng.uniform(0.05, 0.95, size=4))
    target = rng.uniform(0.0, 10.0, size=4)
    return grad_check_report(
        lambda m, s: nll(GaussianOffsets(m, s), target), [mu, sigma], FD_STEP
    )


def _probe_npll(seed, probe):
    rng = _rng(seed, "npll", probe)
    mu = Tensor(rng.uniform(0.0, 10.0, size=4))
    sigma = Tensor(rng.uniform(0.05, 0.95, size=4))
    target = rng.uniform(0.0, 10.0, size=4)
    w = float(rng.uniform(0.05, 1.0))
    return grad_check_report(
        lambda m, s: npll(GaussianOffsets(m, s), target, w), [mu, sigma], FD_STEP
    )


def _probe_giou(seed, probe):
    rng = _rng(seed, "giou_loss", probe)
    pred = Tensor(_random_box(rng).as_array())
    gt = _random_box(rng)
    return grad_check_report(lambda p: giou_loss(p, gt), pred, FD_STEP)


def _probe_focal(loss_fn, needs_sigma=False, hard=False):
    def probe(seed, probe_idx):
        rng = _rng(seed, loss_fn.__name__, probe_idx)
        config = FocalConfig()
        p = Tensor(rng.uniform(0.01, 0.99))
        positive = probe_idx % 2 == 0
        if hard:
            y = 1.0 if positive else 0.0
        else:
            y = float(rng.uniform(0.05, 0.95)) if positive else 0.0
        if needs_sigma and positive:
            sigma_u = Tensor(rng.uniform(0.05, 0.95, size=4))
            return grad_check_report(
                lambda pv, sv: loss_fn(ClassificationSample(pv, y, sv), config),
                [p, sigma_u],
                FD_STEP,
            )
        return grad_check_report(
            lambda pv: loss_fn(ClassificationSample(pv, y), config), p, FD_STEP
        )

    return probe


def _probe_crn(seed, probe):
    rng = _rng(seed, "crn", probe)
    sigma = Tensor(rng.uniform(0.05, 0.95, size=(4, 2, 2)))
    w1 = Tensor(rng.uniform(-0.5, 0.5, size=(4, 4)))
    b1 = Tensor(rng.uniform(-0.2, 0.2, size=4))
    w2 = Tensor(rng.uniform(-0.5, 0.5, size=(1, 4)))
    b2 = Tensor(rng.uniform(-0.2, 0.2, size=1))
    return grad_check_report(
        lambda s, a, c, b, d: crn(s, a, b, c, d).sum(), [sigma, w1, b1, w2, b2], FD_STEP
    )


_HEAD_CONFIG = HeadConfig(
    in_channels=1, tower_depth=1, num_classes=2, grid_h=8, grid_w=8, stride=4.0, use_crn=True
)


def _probe_head(seed, probe):
    rng = _rng(seed, "head", probe)
    head = DetectionHead(_HEAD_CONFIG, seed=int(rng.integers(0, 2**31)))
    for p in head.params.values():
        p.data += rng.normal(0.0, 0.05, size=p.data.shape)
    features = rng.normal(0.0, 1.0, size=(1, 8, 8))
    box = _random_box(rng, lo=2.0, hi=30.0)
    cls = int(rng.integers(0, 2))
    amap = assign([(box, cls)], _HEAD_CONFIG.grid)
    tc = TrainConfig(loss_mode="ufl", regression_mode="npll", steps=1)
    params = list(head.params.values())

    def loss_of(*_):
        out = head.forward(features)
        total, _parts = scene_losses(out, amap, _HEAD_CONFIG.grid, tc)
        return total

    return grad_check_report(loss_of, params, FD_STEP)


GRADCHECK_TARGETS = [
    ("nll", _probe_nll, LOSS_TOLERANCE),
    ("npll", _probe_npll, LOSS_TOLERANCE),
    ("giou_loss", _probe_giou, LOSS_TOLERANCE),
    ("fl", _probe_focal(focal_loss, hard=True), LOSS_TOLERANCE),
    ("qfl", _probe_focal(qfl), LOSS_TOLERANCE),
    ("vfl", _probe_focal(vfl), LOSS_TOLERANCE),
    ("ufl", _probe_focal(ufl, needs_sigma=True), LOSS_TOLERANCE),
    ("crn", _probe_crn, LOSS_TOLERANCE),
    ("head", _probe_head, HEAD_TOLERANCE),
]


def run_gradcheck(seed: int = 0, n_probes: int = 100) -> list[TargetResult]:
    results = []
    for name, probe_fn, tol in GRADCHECK_TARGETS:
        worst = 0.0
        failed_probe = None
        failed_coord = None
        for i in range(n_probes):
            try:
                report = probe_fn(seed, i)
            except GradCheckFailure as err:
                failed_probe = i
                failed_coord = err.coordinate
                break
            worst = max(worst, report.max_rel_error)
        results.append(TargetResult(name, n_probes, worst, tol, failed_probe, failed_coord))
    return results
