"""Learned noise masks for interpreting U-Net segmentation models."""

from .data import Dataset, Sample, SyntheticTaskSpec, generate_synthetic, load_dataset, save_dataset, split
from .interpret import ImportanceMap, NoiseMask, grad_cam, occlusion_sensitivity, unoise_map
from .metrics import dice, mean_dice
from .training import NoiseTrainConfig, OptimizerSettings, train_unoise, train_utility
from .unet import ModelParams, UNetConfig, build, forward, load_checkpoint, save_checkpoint

__version__ = "0.1.0"
