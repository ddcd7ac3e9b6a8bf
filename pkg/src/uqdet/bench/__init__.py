"""Synthetic benchmark: scene generation, training loop, and evaluation."""

from .scenes import Scene, SceneConfig, generate_scene, load_scenes, save_scenes
from .training import TrainConfig, TrainingAborted, TrainResult, train, write_trace
from .evaluation import EvalReport, evaluate, mini_average_precision

__all__ = [
    "Scene",
    "SceneConfig",
    "generate_scene",
    "save_scenes",
    "load_scenes",
    "TrainConfig",
    "TrainResult",
    "TrainingAborted",
    "train",
    "write_trace",
    "EvalReport",
    "evaluate",
    "mini_average_precision",
]
