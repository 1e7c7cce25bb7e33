"""Unsupervised image restoration via noise-invariant representation learning."""

from lir.imaging import (
    add_awgn,
    add_poisson,
    gaussian_blur,
    load_image,
    psnr,
    sample_patches,
    save_image,
    split_unpaired,
    ssim,
)
from lir.models import ModelConfig, ModelSet, init_params, load_weights, save_weights
from lir.losses import LossWeights
from lir.training import TrainConfig, run_training
from lir.restoration import evaluate, restore

__version__ = "0.1.0"
