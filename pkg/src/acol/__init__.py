"""Two-branch complementary classifiers for weakly supervised object localization.

A numpy implementation: tensor kernels, the two-classifier network with
feature erasing, localization maps and boxes, a synthetic two-part-object
dataset, the training loop and a command-line driver.
"""
from .acol_net import NetworkParams, acol_forward, acol_loss_and_grads, init_params
from .localization import BBox, LocMetrics, evaluate, iou
from .synthdata import SynthConfig, generate
from .trainer import TrainConfig, evaluate_model, load_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "BBox",
    "LocMetrics",
    "NetworkParams",
    "SynthConfig",
    "TrainConfig",
    "acol_forward",
    "acol_loss_and_grads",
    "evaluate",
    "evaluate_model",
    "generate",
    "init_params",
    "iou",
    "load_checkpoint",
    "train",
]
