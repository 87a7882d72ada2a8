"""Mixture-of-experts laboratory: gates, routing losses, routing metrics, experiments."""

from .config import ConfigError, ExperimentConfig
from .datasets import ClassSplit, Dataset, combine_fmnist_mnist, filter_by_group, load_idx
from .estimator import MoEClassifier
from .metrics import SelectionTable, h_s, h_u, mutual_information, selection_table
from .models import (
    Architecture,
    MoEModel,
    build_model,
    conditional_forward,
    load_checkpoint,
    mixture_forward,
    save_checkpoint,
)
from .regularizers import RegConfig, importance_loss, similarity_loss
from .tensor import Tensor, backward, grad_check
from .training import RunReport, TrainConfig, distill, run_fig3_protocol, train

__version__ = "0.1.0"

__all__ = [
    "Architecture", "ClassSplit", "ConfigError", "Dataset", "ExperimentConfig", "MoEClassifier",
    "MoEModel", "RegConfig", "RunReport", "SelectionTable", "Tensor", "TrainConfig", "backward",
    "build_model", "combine_fmnist_mnist", "conditional_forward", "distill", "filter_by_group",
    "grad_check", "h_s", "h_u", "importance_loss", "load_checkpoint", "load_idx", "mixture_forward",
    "mutual_information", "run_fig3_protocol", "save_checkpoint", "selection_table",
    "similarity_loss", "train",
]
