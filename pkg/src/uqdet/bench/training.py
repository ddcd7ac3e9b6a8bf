"""Training loop: plain gradient descent on the composed objective.

The total loss per scene is

    L = (1 / N_pos) sum_i L_cls + (1 / N_pos) sum_{i positive} (L_box + lambda * L_unc)

where L_cls is the selected focal-loss variant over every (location,
class) cell, L_box is 1 - GIoU of the decoded mean box, and L_unc is the
selected uncertainty loss (IoU-powered NLL or plain NLL). The regression
and uncertainty terms are skipped when a scene has no positives.

Everything below builds one flat engine graph per step: positives are
gathered from the prediction maps with one-hot matmuls, so the per-sample
loss definitions vectorize without leaving the op set.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..assign import AssignmentMap, assign
from ..autodiff import NonFiniteError, Tensor, clamp, log, matmul, power, relu, sigmoid
from ..boxes import GridSpec, iou_arrays
from ..cls_losses import PROB_EPS, FocalConfig
from ..head import DetectionHead, HeadConfig, HeadOutput
from ..loc_losses import SIGMA_FLOOR, TWO_LOG_TWO_PI, giou_terms
from .scenes import SceneConfig, generate_scene

__all__ = [
    "LOSS_MODES",
    "REGRESSION_MODES",
    "TrainConfig",
    "TrainResult",
    "TrainingAborted",
    "default_head_config",
    "scene_losses",
    "train",
    "write_trace",
]

LOSS_MODES = ("ufl", "qfl", "vfl", "fl")
REGRESSION_MODES = ("npll", "nll", "none")


@dataclass
class TrainConfig:
    lambda_uc: float = 0.05
    alpha: float = 0.25
    gamma: float = 2.0
    loss_mode: str = "ufl"
    regression_mode: str = "npll"
    steps: int = 600
    learning_rate: float = 0.01
    seed: int = 0
    dataset_size: int = 0  # 0 draws a fresh scene every step; k > 0 cycles k scenes

    def __post_init__(self):
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}")
        if self.regression_mode not in REGRESSION_MODES:
            raise ValueError(f"regression_mode must be one of {REGRESSION_MODES}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.dataset_size < 0:
            raise ValueError("dataset_size must be >= 0")
        FocalConfig(self.alpha, self.gamma, self.lambda_uc)  # bounds check

    def focal(self) -> FocalConfig:
        return FocalConfig(self.alpha, self.gamma, self.lambda_uc)


class TrainingAborted(RuntimeError):
    def __init__(self, step: int, param_norm: float, reason: str):
        super().__init__(f"training aborted at step {step} (param norm {param_norm:.3e}): {reason}")
        self.step = step
        self.param_norm = param_norm


@dataclass
class TrainResult:
    head: DetectionHead
    trace: list[dict] = field(default_factory=list)


def default_head_config(scene_config: SceneConfig, train_config: TrainConfig) -> HeadConfig:
    """Head matching the scene geometry; the CRN is wired only for ufl."""
    n = scene_config.image_size // scene_config.stride
    return HeadConfig(
        in_channels=scene_config.feature_channels,
        num_classes=scene_config.classes,
        grid_h=n,
        grid_w=n,
        stride=float(scene_config.stride),
        use_crn=(train_config.loss_mode == "ufl"),
    )


def _one_hot_columns(flat_indices: np.ndarray, hw: int) -> np.ndarray:
    s = np.zeros((hw, flat_indices.size))
    s[flat_indices, np.arange(flat_indices.size)] = 1.0
    return s


def _row(t: Tensor, k: int, width: int) -> Tensor:
    e = np.zeros((1, width))
    e[0, k] = 1.0
    return matmul(Tensor(e), t)


def _classification_maps(amap: AssignmentMap, soft_labels: np.ndarray, num_classes: int, hard: bool):
    h, w = amap.labels.shape
    pos_mask = np.zeros((num_classes, h, w))
    y_map = np.zeros((num_classes, h, w))
    pos = amap.positive_indices()
    if pos.size:
        li = amap.labels.reshape(-1)[pos]
        ii, jj = np.unravel_index(pos, (h, w))
        pos_mask[li, ii, jj] = 1.0
        y_map[li, ii, jj] = 1.0 if hard else soft_labels
    return pos_mask, y_map


def scene_losses(
    out: HeadOutput,
    amap: AssignmentMap,
    grid: GridSpec,
    config: TrainConfig,
) -> tuple[Tensor, dict[str, float]]:
    """Compose the total loss graph for one scene; returns (loss, parts).

    Parts hold the already-normalized per-scene values of each term:
    ``l_uac``, ``l_bbox``, ``l_uc`` and ``total`` with
    total = l_uac + l_bbox + lambda_uc * l_uc.
    """
    num_classes, h, w = out.cls_logits.shape
    hw = h * w
    pos = amap.positive_indices()
    n_pos = pos.size
    norm = float(max(n_pos, 1))

    bbox_sum = None
    uc_sum = None
    quality_sum = None
    soft_labels = np.zeros(0)
    if n_pos:
        sel = Tensor(_one_hot_columns(pos, hw))
        mu_sel = matmul(out.mu.reshape((4, hw)), sel)  # [4, P]
        targets = amap.targets.reshape(4, hw)[:, pos]  # [4, P]
        cx, cy = grid.centers()
        cxp = cx.reshape(-1)[pos][None, :]
        cyp = cy.reshape(-1)[pos][None, :]

        # Decoded mean boxes and label boxes as corner arrays.
        mu_np = mu_sel.data
        pred_np = np.stack(
            [cxp[0] - mu_np[0], cyp[0] - mu_np[2], cxp[0] + mu_np[1], cyp[0] + mu_np[3]], axis=-1
        )
        gt_np = np.stack(
            [
                cxp[0] - targets[0],
                cyp[0] - targets[2],
                cxp[0] + targets[1],
                cyp[0] + targets[3],
            ],
            axis=-1,
        )
        ious = np.clip(iou_arrays(pred_np, gt_np), 0.0, 1.0)
        soft_labels = ious

        if config.regression_mode != "none":
            l_row = _row(mu_sel, 0, 4)
            r_row = _row(mu_sel, 1, 4)
            t_row = _row(mu_sel, 2, 4)
            b_row = _row(mu_sel, 3, 4)
            px0 = cxp - l_row
            px1 = cxp + r_row
            py0 = cyp - t_row
            py1 = cyp + b_row
            bbox_sum = giou_terms(
                px0, py0, px1, py1, gt_np[:, 0][None, :], gt_np[:, 1][None, :],
                gt_np[:, 2][None, :], gt_np[:, 3][None, :],
            ).sum()

            sig_sel = matmul(out.sigma.reshape((4, hw)), sel)
            sig_f = relu(sig_sel - SIGMA_FLOOR) + SIGMA_FLOOR
            var = sig_f * sig_f
            resid = targets - mu_sel
            bracket = resid * resid / (2.0 * var) + 0.5 * log(var)  # [4, P]
            per_pos = matmul(Tensor(np.ones((1, 4))), bracket) + TWO_LOG_TWO_PI  # [1, P]
            if config.regression_mode == "npll":
                uc_sum = (per_pos * ious[None, :]).sum()
            else:
                uc_sum = per_pos.sum()

        if out.quality is not None:
            q_sel = matmul(out.quality.reshape((1, hw)), sel)  # [1, P]
            if out.quality_kind == "centerness":
                lr = np.stack([targets[0], targets[1]])
                tb = np.stack([targets[2], targets[3]])
                q_target = np.sqrt(
                    (lr.min(axis=0) / np.maximum(lr.max(axis=0), 1e-12))
                    * (tb.min(axis=0) / np.maximum(tb.max(axis=0), 1e-12))
                )
            else:
                q_target = ious
            qc = clamp(q_sel, PROB_EPS, 1.0 - PROB_EPS)
            quality_sum = (
                -(q_target[None, :] * log(qc) + (1.0 - q_target[None, :]) * log(1.0 - qc))
            ).sum()

    # Classification over every (class, location) cell.
    pos_mask, y_map = _classification_maps(
        amap, soft_labels, num_classes, hard=(config.loss_mode == "fl")
    )
    neg_mask = 1.0 - pos_mask
    p = clamp(sigmoid(out.cls_logits), PROB_EPS, 1.0 - PROB_EPS)
    alpha, gamma = config.alpha, config.gamma
    if config.loss_mode == "fl":
        pos_term = -alpha * power(1.0 - p, gamma) * log(p)
        neg_term = -(1.0 - alpha) * power(p, gamma) * log(1.0 - p)
    else:
        bce_map = -(Tensor(y_map) * log(p) + (1.0 - Tensor(y_map)) * log(1.0 - p))
        if config.loss_mode == "qfl":
            diff = Tensor(y_map) - p
            pos_term = power(diff * diff, gamma / 2.0) * bce_map
            neg_term = -power(p, gamma) * log(1.0 - p)
        elif config.loss_mode == "vfl":
            pos_term = Tensor(y_map) * bce_map
            neg_term = -alpha * power(p, gamma) * log(1.0 - p)
        else:  # ufl
            comp = (1.0 - out.sigma).reshape((4, hw))
            cert = matmul(Tensor(np.full((1, 4), 0.25)), comp)  # [1, HW]
            cert_tile = matmul(Tensor(np.ones((num_classes, 1))), cert).reshape(
                (num_classes, h, w)
            )
            pos_term = cert_tile * bce_map
            neg_term = -alpha * power(p, gamma) * log(1.0 - p)
    uac_sum = (Tensor(pos_mask) * pos_term).sum() + (Tensor(neg_mask) * neg_term).sum()
    if quality_sum is not None:
        uac_sum = uac_sum + quality_sum

    total = uac_sum / norm
    parts = {"l_uac": uac_sum.item() / norm, "l_bbox": 0.0, "l_uc": 0.0}
    if bbox_sum is not None:
        total = total + bbox_sum / norm
        parts["l_bbox"] = bbox_sum.item() / norm
    if uc_sum is not None:
        total = total + config.lambda_uc * (uc_sum / norm)
        parts["l_uc"] = uc_sum.item() / norm
    parts["total"] = total.item()
    return total, parts


def train(
    train_config: TrainConfig,
    scene_config: SceneConfig,
    head_config: HeadConfig | None = None,
) -> TrainResult:
    """Gradient descent over freshly generated scenes, one scene per step."""
    if head_config is None:
        head_config = default_head_config(scene_config, train_config)
    head = DetectionHead(head_config, seed=train_config.seed)
    grid = head_config.grid
    trace: list[dict] = []

    for step in range(train_config.steps):
        scene_seed = step if train_config.dataset_size == 0 else step % train_config.dataset_size
        scene = generate_scene(scene_config, scene_seed)
        amap = assign(scene.labeled_boxes(), grid)
        head.zero_grad()
        try:
            total, parts = scene_losses(head.forward(scene.features), amap, grid, train_config)
            total.backward()
        except NonFiniteError as err:
            raise TrainingAborted(step, _param_norm(head), str(err)) from err
        for p in head.params.values():
            g = p._grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise TrainingAborted(step, _param_norm(head), "non-finite gradient")
            p.data -= train_config.learning_rate * g
        trace.append({"step": step, **parts})
    return TrainResult(head=head, trace=trace)


def _param_norm(head: DetectionHead) -> float:
    return float(np.sqrt(sum(float(np.sum(p.data**2)) for p in head.params.values())))


TRACE_COLUMNS = ("step", "l_uac", "l_bbox", "l_uc", "total")


def write_trace(trace, path) -> None:
    """Loss trace CSV with columns step, L_uac, L_bbox, L_uc, total."""
    lines = ["step,L_uac,L_bbox,L_uc,total"]
    for row in trace:
        lines.append(
            f"{row['step']},{row['l_uac']!r},{row['l_bbox']!r},{row['l_uc']!r},{row['total']!r}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
