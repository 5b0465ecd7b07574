"""Energy-based image reconstruction with learned data terms, a deep variational
regularizer and patch-based Wasserstein training."""

from .datafid import DivergenceSpline, FrechetSpline, ScaledL2, make_data_term
from .estimators import EnergyReconstructor, SharedPriorReconstructor
from .flow import FlowConfig, NumericalError, backprop_trajectory, rollout
from .imaging import load_image, make_noise, make_operator, psnr, save_image
from .learn import (ControlParams, TrainConfig, Trainer, load_checkpoint, save_checkpoint)
from .tdv import TdvParams, tdv_grad, tdv_value
from .transport import PatchFeatures, sinkhorn_proximal, wasserstein_loss

__version__ = "0.1.0"

__all__ = [
    "ControlParams", "DivergenceSpline", "EnergyReconstructor", "FlowConfig", "FrechetSpline",
    "NumericalError", "PatchFeatures", "ScaledL2", "SharedPriorReconstructor", "TdvParams",
    "TrainConfig", "Trainer", "backprop_trajectory", "load_checkpoint", "load_image",
    "make_data_term", "make_noise", "make_operator", "psnr", "rollout", "save_checkpoint",
    "save_image", "sinkhorn_proximal", "tdv_grad", "tdv_value", "wasserstein_loss",
]
