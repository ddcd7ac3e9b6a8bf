"""Run configuration: one JSON tree covering scene, training, head, inference.

Every field has a default; unknown keys are rejected; dotted overrides
(``train.steps=100``) are applied before validation. Serialization is
canonical (sorted keys, two-space indent) so identical configs are
byte-identical on disk.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .bench.scenes import SceneConfig
from .bench.training import TrainConfig, default_head_config
from .head import HeadConfig, QUALITY_KINDS
from .inference import ScoringMode

__all__ = [
    "ConfigError",
    "HeadOptions",
    "InferenceOptions",
    "RunConfig",
    "load_config",
    "config_to_dict",
    "serialize_config",
    "resolve_head_config",
    "resolve_mode",
]


class ConfigError(ValueError):
    """Invalid or unknown configuration content."""


@dataclass
class HeadOptions:
    tower_depth: int = 2
    use_crn: bool | None = None  # None: wired from the loss mode
    quality_branch: str = "none"

    def __post_init__(self):
        if self.tower_depth < 1:
            raise ConfigError("head.tower_depth must be >= 1")
        if self.quality_branch not in QUALITY_KINDS:
            raise ConfigError(f"head.quality_branch must be one of {QUALITY_KINDS}")


@dataclass
class InferenceOptions:
    score_threshold: float = 0.05
    nms_iou_threshold: float = 0.6
    match_iou_threshold: float = 0.5
    mode: str | None = None  # None: picked from the head wiring
    eval_scenes: int = 20

    def __post_init__(self):
        if not 0.0 <= self.score_threshold < 1.0:
            raise ConfigError("inference.score_threshold must be in [0, 1)")
        if not 0.0 < self.nms_iou_threshold <= 1.0:
            raise ConfigError("inference.nms_iou_threshold must be in (0, 1]")
        if not 0.0 < self.match_iou_threshold <= 1.0:
            raise ConfigError("inference.match_iou_threshold must be in (0, 1]")
        if self.mode is not None and self.mode not in {m.value for m in ScoringMode}:
            raise ConfigError(f"inference.mode must be one of {[m.value for m in ScoringMode]}")
        if self.eval_scenes < 1:
            raise ConfigError("inference.eval_scenes must be >= 1")


@dataclass
class RunConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    head: HeadOptions = field(default_factory=HeadOptions)
    inference: InferenceOptions = field(default_factory=InferenceOptions)


_SECTIONS = {
    "scene": SceneConfig,
    "train": TrainConfig,
    "head": HeadOptions,
    "inference": InferenceOptions,
}

_TUPLE_FIELDS = {("scene", "objects_per_scene"), ("scene", "side_noise_std")}


def _section_fields(cls) -> dict[str, dataclasses.Field]:
    return {f.name: f for f in dataclasses.fields(cls)}


def _build_section(name: str, cls, data: dict):
    known = _section_fields(cls)
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown keys in '{name}': {unknown}")
    kwargs = {}
    for key, value in data.items():
        if (name, key) in _TUPLE_FIELDS:
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"invalid '{name}' config: {err}") from err


def _parse_override(text: str) -> tuple[str, str, object]:
    if "=" not in text:
        raise ConfigError(f"override must look like section.key=value, got {text!r}")
    path, raw = text.split("=", 1)
    parts = path.strip().split(".")
    if len(parts) != 2:
        raise ConfigError(f"override path must be section.key, got {path!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return parts[0], parts[1], value


def load_config(path=None, overrides=(), seed: int | None = None) -> RunConfig:
    """Read a config file (or defaults), apply overrides, validate."""
    data: dict = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as err:
            raise ConfigError(f"cannot read config {path}: {err}") from err
        if not isinstance(data, dict):
            raise ConfigError("config root must be a JSON object")
    unknown = sorted(set(data) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config sections: {unknown}")
    tree = {name: dict(data.get(name, {})) for name in _SECTIONS}
    for item in overrides:
        section, key, value = _parse_override(item)
        if section not in _SECTIONS:
            raise ConfigError(f"unknown override section {section!r}")
        tree[section][key] = value
    if seed is not None:
        tree["scene"]["seed"] = seed
        tree["train"]["seed"] = seed
    sections = {name: _build_section(name, cls, tree[name]) for name, cls in _SECTIONS.items()}
    return RunConfig(**sections)


def config_to_dict(config: RunConfig) -> dict:
    out: dict = {}
    for name in _SECTIONS:
        section = dataclasses.asdict(getattr(config, name))
        for key, value in section.items():
            if isinstance(value, tuple):
                section[key] = list(value)
        out[name] = section
    return out


def serialize_config(config: RunConfig) -> str:
    return json.dumps(config_to_dict(config), sort_keys=True, indent=2) + "\n"


def resolve_head_config(config: RunConfig) -> HeadConfig:
    base = default_head_config(config.scene, config.train)
    use_crn = config.head.use_crn
    if use_crn is None:
        use_crn = config.train.loss_mode == "ufl"
    return HeadConfig(
        in_channels=base.in_channels,
        tower_depth=config.head.tower_depth,
        num_classes=base.num_classes,
        grid_h=base.grid_h,
        grid_w=base.grid_w,
        stride=base.stride,
        use_crn=use_crn,
        quality_branch=config.head.quality_branch,
    )


def resolve_mode(config: RunConfig) -> ScoringMode:
    if config.inference.mode is not None:
        return ScoringMode(config.inference.mode)
    head = resolve_head_config(config)
    if head.quality_branch == "centerness":
        return ScoringMode.CENTERNESS_PRODUCT
    if head.quality_branch == "iou":
        return ScoringMode.IOU_BRANCH_PRODUCT
    if head.use_crn:
        return ScoringMode.UNCERTAINTY_AWARE
    return ScoringMode.RAW_CLASSIFICATION
