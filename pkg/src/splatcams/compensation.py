"""Projector compensation: solve for the input pattern that yields a desired capture."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import torch
from torch import Tensor

from .core import CameraView, logit
from .losses import LossWeights, photometric
from .optim import Adam
from .raster import GBuffer, render_gbuffer
from .scene_io.checkpoint import Checkpoint
from .scene_io.metrics import psnr
from .shading import projector_emit, shade

REACH_THRESHOLD = 1e-4


@dataclass
class CompensationTask:
    checkpoint: Checkpoint
    view: object  # camera index or name registered in the checkpoint
    desired: np.ndarray  # [H, W, 3] in [0, 1]
    mask: Optional[np.ndarray] = None
    iterations: int = 500
    lr: float = 1e-2
    psf_enabled: bool = True
    lam: float = LossWeights.lam

    def validate(self) -> CameraView:
        cam = self.checkpoint.camera(self.view)
        h, w = cam.intrinsics.height, cam.intrinsics.width
        d = np.asarray(self.desired)
        if d.shape != (h, w, 3):
            raise ValueError(f"desired image has shape {d.shape}, view {self.view!r} renders {h}x{w}x3")
        if not np.isfinite(d).all() or d.min() < 0 or d.max() > 1:
            raise ValueError("desired image values must lie in [0, 1]")
        if self.mask is not None and np.asarray(self.mask).shape != (h, w):
            raise ValueError(f"mask shape {np.asarray(self.mask).shape} does not match {h}x{w}")
        if self.iterations < 1 or not self.lr > 0:
            raise ValueError("iterations must be >= 1 and lr > 0")
        return cam


@dataclass
class CompensationReport:
    losses: List[float] = field(default_factory=list)
    best_loss: float = float("inf")
    best_iteration: int = 0
    psnr: float = 0.0  # simulated capture vs desired, inside the mask
    mask: Optional[np.ndarray] = None

    @property
    def best_so_far(self) -> List[float]:
        return list(np.minimum.accumulate(self.losses)) if self.losses else []


class _Simulator:
    """Renders one view of a frozen model for arbitrary patterns; the G-buffer is reused."""

    def __init__(self, ckpt: Checkpoint, view: CameraView, psf_enabled: bool):
        self.device = ckpt.device.detach()
        self.view = view
        self.psf_enabled = psf_enabled
        with torch.no_grad():
            self.gb: GBuffer = render_gbuffer(ckpt.splats.detach(), view)

    def __call__(self, pattern: Tensor):
        light = projector_emit(pattern, self.device, self.psf_enabled)
        return shade(self.gb, light, self.view, self.device)


def reachable_mask(sim: _Simulator, threshold: float = REACH_THRESHOLD) -> np.ndarray:
    """Pixels the projector can light: white-pattern C_p above ``threshold``."""
    pk = sim.device.intrinsics
    white = torch.ones(pk.height, pk.width, 3, dtype=sim.gb.D.dtype)
    with torch.no_grad():
        cp = sim(white).C_p
    return (cp.max(-1).values > threshold).numpy()


def compensate(task: CompensationTask):
    """Optimize pattern logits with Adam; returns ``(pattern, report)``.

    The returned pattern is the best iterate seen. Scene and projector
    parameters are never modified.
    """
    cam = task.validate()
    sim = _Simulator(task.checkpoint, cam, task.psf_enabled)
    dtype = sim.gb.D.dtype
    mask = reachable_mask(sim) if task.mask is None else np.asarray(task.mask, dtype=bool)
    if not mask.any():
        raise ValueError("projector does not reach any pixel of this view")
    m = torch.as_tensor(mask)
    target = torch.as_tensor(task.desired, dtype=dtype)
    pk = sim.device.intrinsics
    z = torch.full((pk.height, pk.width, 3), float(logit(0.5)), dtype=dtype)
    opt = Adam({"z": z}, {"z": task.lr})
    report = CompensationReport(mask=mask)
    best = torch.sigmoid(z)
    for it in range(task.iterations):
        z.requires_grad_(True)
        pattern = torch.sigmoid(z)
        loss = photometric(sim(pattern).image, target, m, task.lam)
        (g,) = torch.autograd.grad(loss, z)
        value = float(loss.detach())
        report.losses.append(value)
        if value < report.best_loss:
            report.best_loss, report.best_iteration = value, it
            best = pattern.detach()
        z = opt.step({"z": z.detach()}, {"z": g})["z"]
    with torch.no_grad():
        final = sim(best).image.numpy()
    report.psnr = psnr(final, task.desired, mask)
    return best.numpy(), report


def simulate_pattern(ckpt: Checkpoint, view, pattern: np.ndarray, psf_enabled: bool = True) -> np.ndarray:
    cam = ckpt.camera(view)
    sim = _Simulator(ckpt, cam, psf_enabled)
    with torch.no_grad():
        return sim(torch.as_tensor(pattern, dtype=sim.gb.D.dtype)).image.numpy()
