"""Missingness-aware multimodal outcome prediction with a cross-fitted pattern rectifier."""

from .datagen import MODALITIES, TASKS, Dataset, GenConfig, generate
from .model import FusionModel, ImputationBaseline, ModelConfig

__all__ = ["MODALITIES", "TASKS", "Dataset", "FusionModel", "GenConfig", "ImputationBaseline", "ModelConfig",
           "generate"]
__version__ = "0.1.0"
