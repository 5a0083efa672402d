"""Precise event spotting with dynamic label assignment, on a small numpy
autodiff engine."""

__version__ = "0.1.0"

from ._kernels import BACKEND
from .matcher import GroundTruthLabel, Predictions, assign_labels, build_cost_matrix, hungarian_solve
from .model import ModelConfig, forward, init_params, load_checkpoint, save_checkpoint
from .spotting_eval import Detection, EvalReport, evaluate
from .synth import SynthConfig, build_dataset
from .trainer import TrainConfig, train

__all__ = [
    "BACKEND",
    "Detection",
    "EvalReport",
    "GroundTruthLabel",
    "ModelConfig",
    "Predictions",
    "SynthConfig",
    "TrainConfig",
    "assign_labels",
    "build_dataset",
    "build_cost_matrix",
    "evaluate",
    "forward",
    "hungarian_solve",
    "init_params",
    "load_checkpoint",
    "save_checkpoint",
    "train",
]
