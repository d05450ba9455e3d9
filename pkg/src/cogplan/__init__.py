"""Contrastive video/EEG alignment and cognition-fused trajectory planning on a
small numpy autodiff engine."""

from .alignment import DrivingThinkingAligner, preprocess_pairs
from .evaluation import MetricReport, run_ablation, run_eval
from .exceptions import (
    CogplanError,
    ConfigError,
    GenerationError,
    InputError,
    TrainingDivergedError,
    UsageError,
)
from .fusion import TrajectoryPlanner
from .signal_prep import EegClip, EegPreprocessor, split
from .synth import gen_pairs, gen_scenes

__version__ = "0.1.0"

__all__ = [
    "CogplanError", "ConfigError", "DrivingThinkingAligner", "EegClip", "EegPreprocessor",
    "GenerationError", "InputError", "MetricReport", "TrainingDivergedError", "TrajectoryPlanner",
    "UsageError", "gen_pairs", "gen_scenes", "preprocess_pairs", "run_ablation", "run_eval", "split",
]
