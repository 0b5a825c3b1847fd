"""Datasets, checkpoints, image files, synthetic scenes and metrics."""
from .checkpoint import Checkpoint, checkpoint_from, load_checkpoint, save_checkpoint
from .dataset import Frame, SceneDataset, load_dataset, save_dataset
from .images import DataError, read_mask, read_pfm, read_png, write_mask, write_pfm, write_png
from .metrics import d_err, psnr, ssim
from .synth import SyntheticSceneSpec, synth_dataset

__all__ = [
    "Checkpoint", "checkpoint_from", "load_checkpoint", "save_checkpoint", "Frame", "SceneDataset",
    "load_dataset", "save_dataset", "DataError", "read_mask", "read_pfm", "read_png", "write_mask",
    "write_pfm", "write_png", "d_err", "psnr", "ssim", "SyntheticSceneSpec", "synth_dataset",
]
