"""Exact-likelihood image modeling with an invertible autoregressive flow,
an autoregressive Gaussian-mixture density, resampling-based guidance, and
a one-step distilled inverse."""

from .ar import ArModel, DimSplit
from .config import TrainConfig
from .data import NoiseSchedule, dequantize, noise_sigma, patchify, synth_dataset, unpatchify
from .distill import DistillConfig, StudentFlow, distill_step, init_student, run_distillation
from .estimator import Farmer
from .flow import AfBlock, Flow, FlowTrace
from .gmm import GmmParams, standard_gaussian
from .sampler import (
    CfgConfig,
    generate,
    generate_latents,
    propose,
    resample_informative,
    resample_redundant,
    weigh,
)
from .tensor import Tensor, backward, finite_diff_check, no_grad
from .training import AdamW, MetricsWriter, Trainer, lr_at

__all__ = [
    "AdamW",
    "AfBlock",
    "ArModel",
    "CfgConfig",
    "DimSplit",
    "DistillConfig",
    "Farmer",
    "Flow",
    "FlowTrace",
    "GmmParams",
    "MetricsWriter",
    "NoiseSchedule",
    "StudentFlow",
    "Tensor",
    "TrainConfig",
    "Trainer",
    "backward",
    "dequantize",
    "distill_step",
    "finite_diff_check",
    "generate",
    "generate_latents",
    "init_student",
    "lr_at",
    "no_grad",
    "noise_sigma",
    "patchify",
    "propose",
    "resample_informative",
    "resample_redundant",
    "run_distillation",
    "standard_gaussian",
    "synth_dataset",
    "unpatchify",
    "weigh",
]

__version__ = "0.1.0"
