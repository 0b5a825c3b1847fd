"""Image quality and geometry error metrics."""
from __future__ import annotations

import math
import numpy as np
import torch
from scipy.spatial import cKDTree

from .. import losses

PSNR_CAP = 100.0


def _t(x) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x, dtype=np.float64)) if not isinstance(x, torch.Tensor) else x.double()


def psnr(a, b, mask=None) -> float:
    """``10 log10(1 / MSE)`` over masked pixels; identical images give ``inf``."""
    a, b = _t(a), _t(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    err = (a - b) ** 2
    if mask is not None:
        m = _t(mask).bool()
        if not bool(m.any()):
            raise ValueError("mask selects no pixels")
        err = err[m]
    mse = float(err.mean())
    return math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)


def psnr_csv(value: float) -> float:
    return min(value, PSNR_CAP)


def ssim(a, b, mask=None) -> float:
    m = None if mask is None else _t(mask).bool()
    return float(losses.ssim(_t(a), _t(b), m))


def d_err(points: np.ndarray, reference: np.ndarray) -> float:
    """Mean distance from each reconstructed point to its nearest reference point."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    reference = np.asarray(reference, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0 or len(reference) == 0:
        raise ValueError("d_err needs non-empty point sets")
    dist, _ = cKDTree(reference).query(points)
    return float(dist.mean())


def depth_point_cloud(gbuffer, min_opacity: float = 0.5) -> np.ndarray:
    """World-space points of pixels whose accumulated opacity exceeds ``min_opacity``."""
    pts = gbuffer.points_world().detach().numpy()
    keep = gbuffer.O.detach().numpy() > min_opacity
    return pts[keep]
