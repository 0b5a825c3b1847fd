"""Training objectives: photometric, geometric regularizers and their weighted sum."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Optional, Union

import torch
import torch.nn.functional as F
from torch import Tensor

from .raster import BlendRecord, GBuffer

ENTROPY_EPS = 1e-6
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


@dataclass
class LossWeights:
    lam: float = 0.2  # DSSIM share inside the photometric term
    depth: float = 1000.0
    normal: float = 0.05
    material: float = 0.002
    entropy: float = 0.1

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossTerms:
    color: Tensor
    distortion: Tensor
    normal: Tensor
    material: Tensor
    entropy: Optional[Tensor] = None

    def items(self):
        return [(f.name, getattr(self, f.name)) for f in fields(self) if getattr(self, f.name) is not None]


def _check_mask(mask: Optional[Tensor], shape) -> Optional[Tensor]:
    if mask is None:
        return None
    mask = mask.to(torch.bool)
    if mask.shape != tuple(shape):
        raise ValueError(f"mask shape {tuple(mask.shape)} does not match image {tuple(shape)}")
    if not bool(mask.any()):
        raise ValueError("mask selects no pixels")
    return mask


def _masked_mean(x: Tensor, mask: Optional[Tensor]) -> Tensor:
    """Mean over pixels (and trailing channels) restricted to ``mask``."""
    if mask is None:
        return x.mean()
    m = mask.to(x.dtype)
    if x.dim() == 3:
        return (x * m[..., None]).sum() / (m.sum() * x.shape[-1])
    return (x * m).sum() / m.sum()


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA, dtype=torch.float64) -> Tensor:
    """Normalized 1D Gaussian taps; the 2D window is their outer product."""
    x = torch.arange(size, dtype=dtype) - size // 2
    g = torch.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


def ssim_map(a: Tensor, b: Tensor) -> Tensor:
    """Per-pixel, per-channel SSIM of ``[H, W, C]`` images.

    Window statistics use mirror padding so flat regions stay flat at the
    border. The Gaussian window is applied separably.
    """
    C = a.shape[-1]
    g = gaussian_window(dtype=a.dtype)
    pad = SSIM_WINDOW // 2
    x = a.permute(2, 0, 1)
    y = b.permute(2, 0, 1)
    stack = torch.cat([x, y, x * x, y * y, x * y])[None]  # [1, 5C, H, W]
    n = stack.shape[1]
    mode = "reflect" if min(a.shape[:2]) > pad else "replicate"
    t = F.pad(stack, (pad, pad, pad, pad), mode=mode)
    t = F.conv2d(t, g.view(1, 1, 1, -1).expand(n, 1, 1, SSIM_WINDOW), groups=n)
    t = F.conv2d(t, g.view(1, 1, -1, 1).expand(n, 1, SSIM_WINDOW, 1), groups=n)[0]
    mx, my, exx, eyy, exy = t.split(C)
    sxx = exx - mx * mx
    syy = eyy - my * my
    sxy = exy - mx * my
    num = (2 * mx * my + SSIM_C1) * (2 * sxy + SSIM_C2)
    den = (mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2)
    return (num / den).permute(1, 2, 0)


def ssim(a: Tensor, b: Tensor, mask: Optional[Tensor] = None) -> Tensor:
    mask = _check_mask(mask, a.shape[:2])
    return _masked_mean(ssim_map(a, b), mask)


def photometric(pred: Tensor, target: Tensor, mask: Optional[Tensor] = None, lam: float = 0.2) -> Tensor:
    """``(1 - lam) * L1 + lam * (1 - SSIM)`` over the masked pixels."""
    if pred.shape != target.shape:
        raise ValueError(f"image shapes differ: {tuple(pred.shape)} vs {tuple(target.shape)}")
    mask = _check_mask(mask, pred.shape[:2])
    l1 = _masked_mean((pred - target).abs(), mask)
    dssim = 1.0 - _masked_mean(ssim_map(pred, target), mask)
    return (1 - lam) * l1 + lam * dssim


def pairwise_distortion(w: Tensor, z: Tensor) -> Tensor:
    """``sum_{i<j} w_i w_j |z_i - z_j|`` along the last axis in O(K log K)."""
    order = torch.argsort(z.detach(), dim=-1, stable=True)
    ws = torch.gather(w, -1, order)
    zs = torch.gather(z, -1, order)
    before_w = torch.cumsum(ws, -1) - ws
    before_wz = torch.cumsum(ws * zs, -1) - ws * zs
    return (ws * (zs * before_w - before_wz)).sum(-1)


def depth_distortion(src: Union[BlendRecord, GBuffer], mask: Optional[Tensor] = None) -> Tensor:
    if isinstance(src, GBuffer):
        return _masked_mean(src.distortion, mask)
    z = torch.where(src.weights > 0, src.depths, torch.zeros_like(src.depths))
    return _masked_mean(pairwise_distortion(src.weights, z), mask)


def _orient(n: Tensor, omega_o: Optional[Tensor]) -> Tensor:
    if omega_o is None:
        omega_o = torch.tensor([0.0, 0.0, -1.0], dtype=n.dtype)
    s = (n * omega_o).sum(-1, keepdim=True)
    return torch.where(s < 0, -n, n)


def normal_consistency(src: Union[BlendRecord, GBuffer], N: Optional[Tensor] = None,
                       mask: Optional[Tensor] = None) -> Tensor:
    """Mean over pixels of ``sum_i w_i (1 - n_i . N)``.

    Splat normals are first turned to face the camera. For a G-buffer the
    blended normal from the rasterizer is used directly and ``N`` defaults to
    its depth-derived normals.
    """
    if isinstance(src, GBuffer):
        N = src.N if N is None else N
        per_pixel = src.O - (src.normal_blend * N).sum(-1)
        return _masked_mean(per_pixel, mask)
    n = _orient(src.normals, getattr(src, "omega_o", None))
    dots = (n * N[..., None, :]).sum(-1)
    return _masked_mean((src.weights * (1 - dots)).sum(-1), mask)


def _safe_norm(sq: Tensor) -> Tensor:
    pos = sq > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq))


def _forward_diff(x: Tensor):
    """Forward differences along x and y, zero on the last column / row."""
    dx = F.pad((x[:, 1:] - x[:, :-1]).movedim(1, -1), (0, 1)).movedim(-1, 1)
    dy = F.pad((x[1:] - x[:-1]).movedim(0, -1), (0, 1)).movedim(-1, 0)
    return dx, dy


def material_smoothness(R: Tensor, B: Tensor, mask: Optional[Tensor] = None) -> Tensor:
    """Albedo-guided edge-aware total variation of the roughness map."""
    rx, ry = _forward_diff(R)
    bx, by = _forward_diff(B.detach())
    grad_r = _safe_norm(rx * rx + ry * ry)
    grad_b = torch.sqrt((bx * bx + by * by).sum(-1))
    return _masked_mean(grad_r * torch.exp(-grad_b), mask)


def mask_entropy(O: Tensor, O_m: Tensor) -> Tensor:
    Oc = O.clamp(ENTROPY_EPS, 1 - ENTROPY_EPS)
    m = O_m.to(O.dtype)
    return (-m * torch.log(Oc) - (1 - m) * torch.log1p(-Oc)).mean()


def total(terms: LossTerms, weights: Optional[LossWeights] = None, mask_available: bool = True) -> Tensor:
    w = weights or LossWeights()
    out = terms.color + w.depth * terms.distortion + w.normal * terms.normal + w.material * terms.material
    if mask_available and terms.entropy is not None:
        out = out + w.entropy * terms.entropy
    return out


def compute_terms(image: Tensor, target: Tensor, gbuffer: GBuffer, weights: Optional[LossWeights] = None,
                  mask: Optional[Tensor] = None, photometric_mask: bool = True,
                  albedo_guide: Optional[Tensor] = None) -> LossTerms:
    """All sub-losses for one rendered frame.

    ``mask`` feeds the entropy term; with ``photometric_mask`` it also limits
    the color loss. ``albedo_guide`` replaces the rendered albedo as the edge
    guide of the material term.
    """
    w = weights or LossWeights()
    color = photometric(image, target, mask if photometric_mask else None, w.lam)
    ent = mask_entropy(gbuffer.O, mask) if mask is not None else None
    return LossTerms(
        color=color,
        distortion=depth_distortion(gbuffer),
        normal=normal_consistency(gbuffer),
        material=material_smoothness(gbuffer.R, gbuffer.B if albedo_guide is None else albedo_guide),
        entropy=ent,
    )


def psnr_from_mse(mse: float) -> float:
    return math.inf if mse <= 0 else 10 * math.log10(1.0 / mse)
