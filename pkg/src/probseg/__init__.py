"""Prompt-conditioned probabilistic segmentation with a latent prompt space."""

from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    AnnotatedSample,
    BoxPrompt,
    Dataset,
    DatasetBundle,
    GenConfig,
    derive_box,
    gen_synthetic,
    load_dataset,
    save_dataset,
)
from .distributions import GaussianDiag, kl_diag, sample_reparam
from .losses import LossBreakdown, bce_loss, dice_loss, total_loss
from .metrics import (
    MetricsReport,
    dsc,
    evaluate,
    ged_squared,
    iou,
    mean_pairwise_distance,
    paired_t_one_tailed,
)
from .model import ModelConfig, ProbSegModel
from .training import TrainConfig, TrainHistory, fit, grad_check

__version__ = "0.1.0"

__all__ = [
    "AnnotatedSample",
    "BoxPrompt",
    "Dataset",
    "DatasetBundle",
    "GaussianDiag",
    "GenConfig",
    "LossBreakdown",
    "MetricsReport",
    "ModelConfig",
    "ProbSegModel",
    "TrainConfig",
    "TrainHistory",
    "bce_loss",
    "derive_box",
    "dice_loss",
    "dsc",
    "evaluate",
    "fit",
    "gen_synthetic",
    "ged_squared",
    "grad_check",
    "iou",
    "kl_diag",
    "load_checkpoint",
    "load_dataset",
    "mean_pairwise_distance",
    "paired_t_one_tailed",
    "sample_reparam",
    "save_checkpoint",
    "save_dataset",
    "total_loss",
]
