"""Compact single-image super-resolution with a sharpness-aware loss,
plus the periocular verification tooling used to evaluate it."""

from .imgcore import ColorSpace, Image, ResizeMethod, degrade, load_image, resize, save_image
from .loss import LossForm, LossWeights, perceptual_loss
from .metrics import psnr, sharpness, ssim
from .model import EsisrConfig, EsisrModel, Upsampler, build, load_checkpoint, save_checkpoint, super_resolve
from .trainer import TrainConfig, train

__version__ = "0.1.0"
