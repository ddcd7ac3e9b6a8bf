"""Single-level detection head with an uncertainty branch.

Two conv towers share the input features: the classification tower feeds
the class logits, and the regression tower feeds both the offset-mean
layer and the uncertainty layer, so mu and sigma are estimated from the
same feature. The certainty network maps (1 - sigma) through two affine
layers (ReLU between, sigmoid after) to a per-location scalar that scales
every channel of the classification feature before the final logit layer.

Offset means leave through exp and are scaled by the stride, keeping them
positive. An optional quality branch (centerness- or IoU-style) supports
the baseline scoring modes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, as_tensor, conv3x3, exp, matmul, relu, sigmoid
from .boxes import GridSpec

__all__ = [
    "HeadConfig",
    "HeadOutput",
    "DetectionHead",
    "crn",
    "scale_channels",
    "save_checkpoint",
    "load_checkpoint",
    "head_from_checkpoint",
]

QUALITY_KINDS = ("none", "centerness", "iou")
CLS_PRIOR = 0.01


@dataclass
class HeadConfig:
    in_channels: int = 16
    tower_depth: int = 2
    num_classes: int = 3
    grid_h: int = 16
    grid_w: int = 16
    stride: float = 4.0
    use_crn: bool = True
    quality_branch: str = "none"

    def __post_init__(self):
        for name in ("in_channels", "tower_depth", "num_classes", "grid_h", "grid_w"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if self.quality_branch not in QUALITY_KINDS:
            raise ValueError(f"quality_branch must be one of {QUALITY_KINDS}")

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self.grid_h, self.grid_w, self.stride)


@dataclass
class HeadOutput:
    """Per-location predictions; all fields are engine tensors."""

    cls_logits: Tensor  # [num_classes, H, W]
    mu: Tensor  # [4, H, W], pixels
    sigma: Tensor  # [4, H, W], in (0, 1)
    certainty_map: Tensor | None  # [1, H, W] CRN output, None without CRN
    quality: Tensor | None = None  # [1, H, W] sigmoid quality, None without branch
    quality_kind: str = "none"
    crn_fused: bool = False


def crn(sigma, w1, w2, b1=None, b2=None) -> Tensor:
    """Certainty network: sigmoid(W2 relu(W1 (1 - sigma) + b1) + b2).

    ``sigma`` is [4, H, W]; W1 is 4x4, W2 is 1x4. Biases default to zero so
    the bare two-layer form is directly checkable.
    """
    s = as_tensor(sigma)
    if s.data.ndim != 3 or s.shape[0] != 4:
        raise ValueError(f"crn expects sigma [4, H, W], got {s.shape}")
    _, h, w = s.shape
    hw = h * w
    comp = (1.0 - s).reshape((4, hw))
    hidden = matmul(as_tensor(w1), comp)
    if b1 is not None:
        hidden = hidden + matmul(as_tensor(b1).reshape((4, 1)), Tensor(np.ones((1, hw))))
    hidden = relu(hidden)
    out = matmul(as_tensor(w2), hidden)
    if b2 is not None:
        out = out + matmul(as_tensor(b2).reshape((1, 1)), Tensor(np.ones((1, hw))))
    return sigmoid(out).reshape((1, h, w))


def scale_channels(x: Tensor, s: Tensor) -> Tensor:
    """Multiply every channel of x [C,H,W] by the per-location map s [1,H,W]."""
    c, h, w = x.shape
    tiled = matmul(Tensor(np.ones((c, 1))), s.reshape((1, h * w))).reshape((c, h, w))
    return x * tiled


class DetectionHead:
    """Owns the parameter tensors and runs the forward pass."""

    def __init__(self, config: HeadConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng([seed, 0x48EAD])
        c = config.in_channels
        for branch in ("cls_tower", "reg_tower"):
            for i in range(config.tower_depth):
                self._add_conv(rng, f"{branch}.{i}", c, c)
        self._add_conv(rng, "cls_out", c, config.num_classes)
        self._add_conv(rng, "mu_out", c, 4)
        self._add_conv(rng, "sigma_out", c, 4)
        if config.use_crn:
            bound = 1.0 / np.sqrt(4.0)
            self.params["crn.w1"] = Tensor(rng.uniform(-bound, bound, size=(4, 4)))
            self.params["crn.b1"] = Tensor(np.zeros(4))
            self.params["crn.w2"] = Tensor(rng.uniform(-bound, bound, size=(1, 4)))
            self.params["crn.b2"] = Tensor(np.zeros(1))
        if config.quality_branch != "none":
            self._add_conv(rng, "quality_out", c, 1)
        # Rare-positive prior keeps initial scores near CLS_PRIOR.
        self.params["cls_out.b"].data[:] = -np.log((1.0 - CLS_PRIOR) / CLS_PRIOR)

    def _add_conv(self, rng, name: str, c_in: int, c_out: int) -> None:
        bound = 1.0 / np.sqrt(c_in * 9.0)
        self.params[f"{name}.w"] = Tensor(rng.uniform(-bound, bound, size=(c_out, c_in, 3, 3)))
        self.params[f"{name}.b"] = Tensor(np.zeros(c_out))

    def _conv(self, name: str, x: Tensor) -> Tensor:
        return conv3x3(x, self.params[f"{name}.w"], self.params[f"{name}.b"])

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def forward(self, features) -> HeadOutput:
        cfg = self.config
        x = as_tensor(features)
        if x.shape != (cfg.in_channels, cfg.grid_h, cfg.grid_w):
            raise ValueError(
                f"features must be [{cfg.in_channels}, {cfg.grid_h}, {cfg.grid_w}], got {x.shape}"
            )
        x_cls = x
        for i in range(cfg.tower_depth):
            x_cls = relu(self._conv(f"cls_tower.{i}", x_cls))
        x_reg = x
        for i in range(cfg.tower_depth):
            x_reg = relu(self._conv(f"reg_tower.{i}", x_reg))

        mu = cfg.stride * exp(self._conv("mu_out", x_reg))
        sigma = sigmoid(self._conv("sigma_out", x_reg))

        certainty_map = None
        if cfg.use_crn:
            certainty_map = crn(
                sigma,
                self.params["crn.w1"],
                self.params["crn.w2"],
                self.params["crn.b1"],
                self.params["crn.b2"],
            )
            x_cls = scale_channels(x_cls, certainty_map)
        cls_logits = self._conv("cls_out", x_cls)

        quality = None
        if cfg.quality_branch != "none":
            quality = sigmoid(self._conv("quality_out", x_reg))

        return HeadOutput(
            cls_logits=cls_logits,
            mu=mu,
            sigma=sigma,
            certainty_map=certainty_map,
            quality=quality,
            quality_kind=cfg.quality_branch,
            crn_fused=cfg.use_crn,
        )


def save_checkpoint(params: dict[str, Tensor], path) -> None:
    """Named-tensor checkpoint: length-prefixed JSON header + float64 LE payload."""
    names = list(params)
    header = {
        "format": "uqdet-checkpoint-v1",
        "tensors": [{"name": n, "shape": list(params[n].data.shape)} for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(params[n].data, dtype="<f8").tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        header_len = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(header_len).decode("utf-8"))
        if header.get("format") != "uqdet-checkpoint-v1":
            raise ValueError(f"{path} is not a recognized checkpoint")
        out: dict[str, np.ndarray] = {}
        for item in header["tensors"]:
            shape = tuple(item["shape"])
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(count * 8), dtype="<f8").reshape(shape)
            out[item["name"]] = data.astype(np.float64).copy()
    return out


def head_from_checkpoint(path, config: HeadConfig) -> DetectionHead:
    """Rebuild a head from a checkpoint, validating shapes against the config."""
    arrays = load_checkpoint(path)
    head = DetectionHead(config, seed=0)
    expected = {n: p.data.shape for n, p in head.params.items()}
    if set(arrays) != set(expected):
        missing = sorted(set(expected) - set(arrays))
        extra = sorted(set(arrays) - set(expected))
        raise ValueError(f"checkpoint/config mismatch: missing={missing} unexpected={extra}")
    for name, arr in arrays.items():
        if arr.shape != expected[name]:
            raise ValueError(
                f"checkpoint tensor {name} has shape {arr.shape}, config expects {expected[name]}"
            )
        head.params[name].data[...] = arr
    return head
