"""Barlow Twins pre-training plus U-Net fine-tuning for binary segmentation."""

from .checkpoint import Checkpoint
from .data import DatasetManifest, SynthSpec, generate_synthetic, limit_labels, load_dataset, make_folds, split
from .experiment import ExperimentConfig, parse_experiment_config, run_experiment
from .losses import bce_loss, combined_loss, dice_loss
from .metrics import confusion, dice_coefficient, mean_iou, precision
from .models import ModelArchConfig, Variant, build_encoder, build_model
from .optim import Adam, TrainConfig
from .selfsup import BTConfig, augment_pair, bt_loss, cross_correlation, pretrain
from .train import evaluate, finetune, transfer_encoder

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "BTConfig",
    "Checkpoint",
    "DatasetManifest",
    "ExperimentConfig",
    "ModelArchConfig",
    "SynthSpec",
    "TrainConfig",
    "Variant",
    "augment_pair",
    "bce_loss",
    "bt_loss",
    "build_encoder",
    "build_model",
    "combined_loss",
    "confusion",
    "cross_correlation",
    "dice_coefficient",
    "dice_loss",
    "evaluate",
    "finetune",
    "generate_synthetic",
    "limit_labels",
    "load_dataset",
    "make_folds",
    "mean_iou",
    "parse_experiment_config",
    "precision",
    "pretrain",
    "run_experiment",
    "split",
    "transfer_encoder",
    "evaluate",
]
