"""Anatomy-conditioned latent diffusion for prostate DWI at desk scale."""

from . import (
    checkpoint,
    codec,
    conditioning,
    config,
    control,
    dataset,
    diffusion,
    errors,
    imgops,
    metrics,
    nnutil,
    preprocess,
)

__version__ = "0.1.0"

__all__ = [
    "checkpoint",
    "codec",
    "conditioning",
    "config",
    "control",
    "dataset",
    "diffusion",
    "errors",
    "imgops",
    "metrics",
    "nnutil",
    "preprocess",
    "__version__",
]
