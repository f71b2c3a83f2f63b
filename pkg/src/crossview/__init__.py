"""Zero-shot dense matching from cross-view completion transformers."""

from .model import CrossViewModel, ModelConfig, init_params
from .datagen import FlowField, make_pair, generate_dataset
from .costvol import CostOptions, CostVolume, zero_shot_match

__all__ = ["CrossViewModel", "ModelConfig", "init_params", "FlowField", "make_pair",
           "generate_dataset", "CostOptions", "CostVolume", "zero_shot_match"]
