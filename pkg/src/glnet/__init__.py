"""Global-local face upsampling networks in numpy.

A global stream (bilinear deconvolution plus a fully connected detail
generator) feeds a local convolutional refinement network. The package also
covers the blur-and-decimate degradation model, momentum SGD training with
optional adversarial fine-tuning, quality metrics, image and checkpoint I/O
and a command-line interface (``glnet``).
"""
from .checkpoint import load as load_checkpoint
from .checkpoint import save as save_checkpoint
from .degradation import DegradationOperator, back_project, classical_upsample, degrade
from .metrics import evaluate, psnr, ssim, wpsnr
from .models import (
    ModelDescriptor,
    build_discriminator,
    build_gln,
    build_gn,
    build_gn_only,
    build_ln,
    build_ln_only,
    receptive_field,
)
from .training import AdvConfig, PairSet, TrainConfig, finetune_adversarial, train_reconstruction

__version__ = "0.1.0"

__all__ = [
    "AdvConfig",
    "DegradationOperator",
    "ModelDescriptor",
    "PairSet",
    "TrainConfig",
    "back_project",
    "build_discriminator",
    "build_gln",
    "build_gn",
    "build_gn_only",
    "build_ln",
    "build_ln_only",
    "classical_upsample",
    "degrade",
    "evaluate",
    "finetune_adversarial",
    "load_checkpoint",
    "psnr",
    "receptive_field",
    "save_checkpoint",
    "ssim",
    "train_reconstruction",
    "wpsnr",
]
