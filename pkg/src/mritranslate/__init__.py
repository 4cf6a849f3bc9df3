"""Paired MRI modality translation at desk scale: 2.5D slab preprocessing,
an attention-residual/nested-decoder GAN, six-metric evaluation, ablation
grid, and error/feature visualization."""

from .dataio import (
    DatasetManifest,
    PairedSample,
    PairedSlabs,
    Slab25D,
    VolumeRecord,
    build_slab,
    default_center,
    normalize_slice,
    preprocess_volumes,
    split_dataset,
)
from .discriminator import DiscriminatorConfig, PatchDiscriminator
from .errors import ConfigError, DataError, DivergenceError, TopologyError
from .generator import GeneratorConfig, SEBlock, TranslationGenerator
from .metrics import MetricReport, SsimParams, aggregate, mse, ms_ssim, nmse, psnr, ssim
from .objectives import LossBreakdown, LossWeights, total_generator_loss
from .training import TrainConfig, Trainer, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "DatasetManifest",
    "DiscriminatorConfig",
    "DivergenceError",
    "GeneratorConfig",
    "LossBreakdown",
    "LossWeights",
    "MetricReport",
    "PairedSample",
    "PairedSlabs",
    "PatchDiscriminator",
    "SEBlock",
    "Slab25D",
    "SsimParams",
    "TopologyError",
    "TrainConfig",
    "Trainer",
    "TranslationGenerator",
    "VolumeRecord",
    "aggregate",
    "build_slab",
    "default_center",
    "load_checkpoint",
    "mse",
    "ms_ssim",
    "nmse",
    "normalize_slice",
    "preprocess_volumes",
    "psnr",
    "save_checkpoint",
    "split_dataset",
    "ssim",
    "total_generator_loss",
]
