"""Attention distillation from a reasoning decoder to a question decoder, on a synthetic grid VQA task."""

from .gridvqa import GridConfig, build_dataset, generate_dataset, load_dataset
from .model import ModelConfig, VQAModel
from .trainloop import TrainConfig, train_both, train_stage1, train_stage2

__all__ = [
    "GridConfig", "ModelConfig", "TrainConfig", "VQAModel", "build_dataset", "generate_dataset", "load_dataset",
    "train_both", "train_stage1", "train_stage2",
]
__version__ = "0.1.0"
