"""Differentiable projector-camera simulation on BRDF-augmented 2D Gaussian surfels."""
from .core import CameraView, NumericalError, Pinhole, Pose, ProjectorDevice, SplatPrimitive, Splats
from .raster import BACKEND, GBuffer, render_gbuffer, render_gbuffer_bruteforce, set_threads
from .shading import projector_emit, shade, simulate
from .losses import LossTerms, LossWeights, compute_terms, total
from .diff import backward, gradcheck
from .optim import TrainConfig, TrainResult, default_device, init_splats, perturb_splats, train
from .compensation import CompensationReport, CompensationTask, compensate, simulate_pattern
from .scene_io import (Checkpoint, DataError, SceneDataset, SyntheticSceneSpec, load_checkpoint, load_dataset, psnr,
                       save_checkpoint, save_dataset, ssim, synth_dataset)

__version__ = "0.1.0"

__all__ = [
    "CameraView", "NumericalError", "Pinhole", "Pose", "ProjectorDevice", "SplatPrimitive", "Splats",
    "BACKEND", "GBuffer", "render_gbuffer", "render_gbuffer_bruteforce", "set_threads",
    "projector_emit", "shade", "simulate",
    "LossTerms", "LossWeights", "compute_terms", "total",
    "backward", "gradcheck",
    "TrainConfig", "TrainResult", "default_device", "init_splats", "perturb_splats", "train",
    "CompensationReport", "CompensationTask", "compensate", "simulate_pattern",
    "Checkpoint", "DataError", "SceneDataset", "SyntheticSceneSpec", "load_checkpoint", "load_dataset", "psnr",
    "save_checkpoint", "save_dataset", "ssim", "synth_dataset",
]
