"""Projector light transport, BRDF and camera tone mapping."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F
from torch import Tensor

from .core import CameraView, ProjectorDevice, Splats, check_finite, srgb_encode
from .raster import GBuffer, render_gbuffer

COVERAGE_EPS = 1e-6
DOT_EPS = 1e-6


@dataclass
class ProjectorFrameLight:
    """Linear radiance leaving each projector pixel, ``[H_p, W_p, 3]``."""

    radiance: Tensor


@dataclass
class ShadedImage:
    image: Tensor  # [H, W, 3] tone-mapped, in [0, 1]
    C_p: Tensor  # linear projector contribution
    C_g: Tensor  # linear residual contribution
    linear: Tensor  # clamped linear sum before tone mapping


def projector_emit(pattern: Tensor, device: ProjectorDevice, psf_enabled: bool = True) -> ProjectorFrameLight:
    """``psf * (gain * pattern ** gamma)`` per channel, zero padded at the border."""
    lin = pattern ** device.gamma * device.gain
    if psf_enabled:
        k = device.psf.flip(0, 1)  # conv2d correlates; flip for a true convolution
        weight = k.expand(3, 1, *k.shape).to(lin.dtype)
        pad = k.shape[0] // 2
        lin = F.conv2d(lin.permute(2, 0, 1)[None], weight, padding=pad, groups=3)[0].permute(1, 2, 0)
    return ProjectorFrameLight(lin)


def sample_projector(light: ProjectorFrameLight, x_s: Tensor, device: ProjectorDevice):
    """Bilinear lookup of projector radiance at world points ``[..., 3]``.

    Returns ``(radiance, omega_p, lit)`` where ``omega_p`` points from the
    surface toward the projector and ``lit`` marks points inside the frame.
    """
    K = device.intrinsics
    R, t = device.pose.torch(x_s.dtype)
    xp = x_s @ R.T + t
    z = xp[..., 2]
    front = z > 1e-6
    zs = torch.where(front, z, torch.ones_like(z))
    u = K.fx * xp[..., 0] / zs + K.cx
    v = K.fy * xp[..., 1] / zs + K.cy
    lit = front & (u >= 0) & (u < K.width) & (v >= 0) & (v < K.height)
    u = torch.where(lit, u, torch.zeros_like(u))
    v = torch.where(lit, v, torch.zeros_like(v))
    x0 = torch.floor(u.detach())
    y0 = torch.floor(v.detach())
    fx, fy = u - x0, v - y0
    x0, y0 = x0.long(), y0.long()
    img = light.radiance.reshape(-1, 3)

    def tap(xi, yi):
        ok = lit & (xi < K.width) & (yi < K.height)
        idx = torch.where(ok, yi * K.width + xi, torch.zeros_like(xi))
        return img[idx.reshape(-1)].reshape(*idx.shape, 3) * ok[..., None]

    L = (tap(x0, y0) * ((1 - fx) * (1 - fy))[..., None]
         + tap(x0 + 1, y0) * (fx * (1 - fy))[..., None]
         + tap(x0, y0 + 1) * ((1 - fx) * fy)[..., None]
         + tap(x0 + 1, y0 + 1) * (fx * fy)[..., None])
    center = torch.as_tensor(device.pose.center, dtype=x_s.dtype)
    to_p = center - x_s
    omega = to_p / to_p.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    return L, omega, lit


def _dot(a: Tensor, b: Tensor) -> Tensor:
    return (a * b).sum(-1)


def brdf_eval(omega_o: Tensor, omega_p: Tensor, N: Tensor, B: Tensor, R: Tensor) -> Tensor:
    """Lambertian diffuse plus a GGX / Schlick / Smith-style specular lobe.

    Returns ``[..., 3]``. Dot products with the normal are clamped to a small
    positive value; callers zero out back-facing configurations.
    """
    nl = _dot(N, omega_p).clamp_min(DOT_EPS)
    nv = _dot(N, omega_o).clamp_min(DOT_EPS)
    h = omega_o + omega_p
    hn = h.norm(dim=-1)
    ok = hn > 1e-12
    h = h / torch.where(ok, hn, torch.ones_like(hn))[..., None]
    nh = _dot(N, h)
    vh = _dot(omega_o, h)
    r4 = R**4
    D = r4 / (math.pi * (nh * nh * (r4 - 1) + 1) ** 2)
    Fr = 0.04 + 0.96 * torch.pow(2.0, (-5.55473 * vh - 6.98316) * vh)
    k = (R + 1) ** 2 / 8
    # D F G / (4 nl nv) with the nl * nv factor of G cancelled
    spec = D * Fr / (4 * (nl * (1 - k) + k) * (nv * (1 - k) + k))
    spec = torch.where(ok, spec, torch.zeros_like(spec))
    return B / math.pi + spec[..., None]


def shade(gbuffer: GBuffer, light: ProjectorFrameLight, view: CameraView, device: ProjectorDevice,
          shadow_depth: Optional[Tensor] = None, shadow_bias: float = 0.02) -> ShadedImage:
    """Combine projector direct light with the residual term and tone map.

    ``shadow_depth`` (a projector-view depth map) enables an optional
    visibility test; by default occlusion is left to the learned albedo.
    """
    O = gbuffer.O
    covered = O > COVERAGE_EPS
    D = torch.where(covered, gbuffer.D, torch.ones_like(gbuffer.D))
    R, t = view.pose.torch(D.dtype)
    x_cam = D[..., None] * view.intrinsics.ray_grid(D.dtype)
    x_s = (x_cam - t) @ R
    N = gbuffer.N @ R
    to_c = torch.as_tensor(view.pose.center, dtype=D.dtype) - x_s
    omega_o = to_c / to_c.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    L, omega_p, lit = sample_projector(light, x_s, device)
    cos = _dot(omega_p, N).clamp_min(0.0)
    f = brdf_eval(omega_o, omega_p, N, gbuffer.B, gbuffer.R)
    C_p = f * L * cos[..., None]
    mask = covered
    if shadow_depth is not None:
        mask = mask & ~_shadowed(x_s, shadow_depth, device, shadow_bias)
    C_p = torch.where(mask[..., None], C_p, torch.zeros_like(C_p))
    linear = (C_p + gbuffer.C_g).clamp_min(0.0)
    image = srgb_encode(linear).clamp(0.0, 1.0)
    return ShadedImage(image, C_p, gbuffer.C_g, linear)


def _shadowed(x_s: Tensor, shadow_depth: Tensor, device: ProjectorDevice, bias: float) -> Tensor:
    K = device.intrinsics
    R, t = device.pose.torch(x_s.dtype)
    xp = (x_s @ R.T + t).detach()
    z = xp[..., 2].clamp_min(1e-6)
    u = torch.round(K.fx * xp[..., 0] / z + K.cx).long()
    v = torch.round(K.fy * xp[..., 1] / z + K.cy).long()
    inside = (u >= 0) & (u < K.width) & (v >= 0) & (v < K.height)
    ref = shadow_depth[v.clamp(0, K.height - 1), u.clamp(0, K.width - 1)]
    return inside & (ref > 0) & (z > ref * (1 + bias))


def render_shadow_depth(splats: Splats, device: ProjectorDevice) -> Tensor:
    with torch.no_grad():
        return render_gbuffer(splats, CameraView(device.intrinsics, device.pose, "projector")).D


def simulate(splats: Splats, device: ProjectorDevice, view: CameraView, pattern: Tensor,
             psf_enabled: bool = True, check: bool = False, threads: Optional[int] = None,
             shadows: bool = False):
    """Full forward model for one (view, pattern) pair: ``(ShadedImage, GBuffer)``.

    With ``check`` every stage output is tested for non-finite values and the
    first offender raises :class:`NumericalError`.
    """
    if check:
        check_finite("splat parameters", **splats.params(), **device.params())
    gb = render_gbuffer(splats, view, threads=threads)
    if check:
        check_finite("rasterize", C_g=gb.C_g, B=gb.B, R=gb.R, O=gb.O, D=gb.D)
        check_finite("depth normals", N=gb.N)
    light = projector_emit(pattern, device, psf_enabled)
    if check:
        check_finite("projector emit", radiance=light.radiance)
    shadow = render_shadow_depth(splats, device) if shadows else None
    out = shade(gb, light, view, device, shadow_depth=shadow)
    if check:
        check_finite("shade", C_p=out.C_p, image=out.image)
    return out, gb
