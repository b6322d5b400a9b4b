"""Masked-autoencoder pretraining for fused PET/CT volumes on a numpy autodiff core."""
from .volume import Channel, Volume
from .autonet import Fusion, UNetConfig, build_unet
from .trainer import TrainConfig, finetune, linear_probe, pretrain

__version__ = "0.1.0"

__all__ = [
    "Channel",
    "Volume",
    "Fusion",
    "UNetConfig",
    "build_unet",
    "TrainConfig",
    "pretrain",
    "finetune",
    "linear_probe",
    "__version__",
]
