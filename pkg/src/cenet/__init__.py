"""Temporal knowledge graph forecasting with historical/non-historical copy scoring
and historical contrastive learning."""

from .data import Quadruple, TkgDataset, add_inverse_quadruples, compute_stats, load_dataset
from .evaluation import InferenceConfig, RankReport, ablation_variant, evaluate
from .history import QueryContext, build_contexts, clamp_to_z, contexts_for_split
from .model import HyperParams, ModelParams, train_stage1
from .classifier import build_mask, train_stage2

__all__ = [
    "Quadruple", "TkgDataset", "add_inverse_quadruples", "compute_stats", "load_dataset",
    "InferenceConfig", "RankReport", "ablation_variant", "evaluate",
    "QueryContext", "build_contexts", "clamp_to_z", "contexts_for_split",
    "HyperParams", "ModelParams", "train_stage1",
    "build_mask", "train_stage2",
]

__version__ = "0.1.0"
