"""Object branch with class-aware attention, baseline fusion block, losses and training."""

from boxprior.fusion.branch import (
    BoxFeatureSet,
    Scores,
    branch_predict,
    class_aware_attention,
    fuse_layer,
    fuse_multiscale,
    msfskd_fuse,
    predict_3d_layer,
    select_box_features,
)
from boxprior.fusion.config import TrainConfig, load_config, parse_config
from boxprior.fusion.features import FeatureStack, encode_toy
from boxprior.fusion.losses import LossReport, compute_losses
from boxprior.fusion.model import ModelParams, init_model
from boxprior.fusion.training import SGD, evaluate, inbox_accuracy, train, train_step

__all__ = [
    "BoxFeatureSet",
    "FeatureStack",
    "LossReport",
    "ModelParams",
    "SGD",
    "Scores",
    "TrainConfig",
    "branch_predict",
    "class_aware_attention",
    "compute_losses",
    "encode_toy",
    "evaluate",
    "fuse_layer",
    "fuse_multiscale",
    "inbox_accuracy",
    "init_model",
    "load_config",
    "msfskd_fuse",
    "parse_config",
    "predict_3d_layer",
    "select_box_features",
    "train",
    "train_step",
]
