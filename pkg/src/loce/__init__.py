"""Score-guided equilibrium training for long-tailed classification on synthetic data."""

from .boxes import Box, JitterSample, RegressionTarget, encode_target, generate_box, iou
from .losses import equilibrium_loss, margin, softmax_ce
from .memory import FeatureMemory, MemoryEntry, SamplerConfig, class_probabilities
from .scores import MeanScoreVector, frequency_indicator, new_tracker
from .trainer import MetricsReport, Model, TrainConfig, evaluate, run_pipeline, run_stage1, run_stage2
from .world import World, WorldSpec, generate_world

__version__ = "0.1.0"

__all__ = [
    "Box", "JitterSample", "RegressionTarget", "encode_target", "generate_box", "iou",
    "equilibrium_loss", "margin", "softmax_ce",
    "FeatureMemory", "MemoryEntry", "SamplerConfig", "class_probabilities",
    "MeanScoreVector", "frequency_indicator", "new_tracker",
    "MetricsReport", "Model", "TrainConfig", "evaluate", "run_pipeline", "run_stage1", "run_stage2",
    "World", "WorldSpec", "generate_world",
]
