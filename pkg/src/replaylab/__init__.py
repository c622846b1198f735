"""Experience replay with tiny episodic memories for continual learning."""
from .errors import ConfigError, IdxFormatError, NumericError, ReplayLabError, ShapeError
from .learners import AGem, ExperienceReplay, Finetune, OnlineEwc, make_learner
from .memory import (
    HybridMemory,
    KMeansMemory,
    MeanOfFeaturesMemory,
    ReservoirMemory,
    RingMemory,
    make_memory,
)
from .nn import Batch, GradientVector, MlpModel, project_agem
from .protocol import AccuracyMatrix, average_accuracy, forgetting, run_single_pass

__version__ = "0.1.0"

__all__ = [
    "AGem",
    "AccuracyMatrix",
    "Batch",
    "ConfigError",
    "ExperienceReplay",
    "Finetune",
    "GradientVector",
    "HybridMemory",
    "IdxFormatError",
    "KMeansMemory",
    "MeanOfFeaturesMemory",
    "MlpModel",
    "NumericError",
    "OnlineEwc",
    "ReplayLabError",
    "ReservoirMemory",
    "RingMemory",
    "ShapeError",
    "average_accuracy",
    "forgetting",
    "make_learner",
    "make_memory",
    "project_agem",
    "run_single_pass",
]
