"""Tile-based differentiable surfel rasterization into per-view G-buffers.

The per-pixel blending loop lives in a compiled kernel (``_kernel.pyx``) with
a numpy fallback; everything per-splat (activations, camera transform, SH
color) is plain torch so autograd carries gradients back to raw parameters.
:func:`render_gbuffer_bruteforce` is an independent dense torch renderer used
as an oracle.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from torch import Tensor

from ..core import NEAR_PLANE, CameraView, Pinhole, Pose, SplatPrimitive, Splats, quat_to_rotmat, residual_color
from . import _backend
from ._backend import BACKEND, get_threads, set_threads

TILE_SIZE = 16
SUPPORT = 4.5  # rho cutoff, i.e. 3 sigma in either the surfel or screen space
SCREEN_SIGMA = math.sqrt(2) / 2
T_MIN = 1e-4
DEPTH_EPS = 1e-8
NORMAL_EPS = 1e-12

# feature channel layout blended by the kernel
CG, ALB, RGH, NRM = slice(0, 3), slice(3, 6), slice(6, 7), slice(7, 10)
N_FEAT = 10

__all__ = [
    "BACKEND", "GBuffer", "BlendRecord", "Prepared", "prepare", "bin_splats", "render_gbuffer",
    "render_gbuffer_bruteforce", "ray_splat_intersect", "gaussian_weight", "filtered_weight",
    "depth_to_normals", "set_threads", "get_threads",
]


def gaussian_weight(uv) -> float:
    uv = np.asarray(uv, dtype=np.float64)
    return float(np.exp(-0.5 * (uv[..., 0] ** 2 + uv[..., 1] ** 2)))


def filtered_weight(G: float, d_px: float, sigma: float = SCREEN_SIGMA) -> float:
    return max(G, math.exp(-d_px * d_px / (2 * sigma * sigma)))


def ray_splat_intersect(primitive: SplatPrimitive, origin, direction, pose: Optional[Pose] = None):
    """Intersect a world-space ray with a surfel's plane.

    Returns ``(uv, z)`` with ``z`` the depth of the hit in the frame of
    ``pose`` (identity by default), or ``None`` on a miss.
    """
    pose = pose or Pose.identity()
    origin = np.asarray(origin, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    r = quat_to_rotmat(np.asarray(primitive.quat, dtype=np.float64))
    tu, tv, tw = r[:, 0], r[:, 1], r[:, 2]
    denom = direction @ tw
    if abs(denom) / np.linalg.norm(direction) < 1e-9:
        return None
    t = (np.asarray(primitive.center) - origin) @ tw / denom
    if t <= 1e-6:
        return None
    hit = origin + t * direction
    z = pose.apply(hit)[2]
    if z <= 1e-6:
        return None
    s = primitive.scale
    rel = hit - primitive.center
    return np.array([rel @ tu / s[0], rel @ tv / s[1]]), float(z)


# ---------------------------------------------------------------------------
# per-view preprocessing


@dataclass
class Prepared:
    """Per-splat camera-space quantities for the visible subset."""

    index: Tensor  # indices into the splat batch
    mean2d: Tensor  # projected centers, pixels
    pc: Tensor  # camera-space centers
    a: Tensor  # t_u / s_u, camera frame
    b: Tensor  # t_v / s_v, camera frame
    n: Tensor  # t_w, camera frame
    opac: Tensor
    feat: Tensor  # [res rgb, albedo rgb, roughness, camera-facing normal]
    tu: Tensor
    tv: Tensor
    scales: Tensor


def prepare(splats: Splats, view: CameraView) -> Prepared:
    dtype = splats.dtype
    R, t = view.pose.torch(dtype)
    K = view.intrinsics
    pc_all = splats.means @ R.T + t
    z = pc_all[:, 2]
    visible = (z > NEAR_PLANE).nonzero().squeeze(1)
    sub = splats.select(visible)
    pc = pc_all[visible]
    rot = R @ quat_to_rotmat(sub.quats)  # camera-frame tangent frames as columns
    tu, tv, tw = rot[..., 0], rot[..., 1], rot[..., 2]
    scales = sub.scales()
    a = tu / scales[:, :1]
    b = tv / scales[:, 1:]
    mean2d = torch.stack([K.fx * pc[:, 0] / pc[:, 2] + K.cx, K.fy * pc[:, 1] / pc[:, 2] + K.cy], -1)
    cam_center = -R.T @ t
    to_cam = cam_center - sub.means
    dirs = to_cam / to_cam.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    res = residual_color(sub.sh, dirs)
    facing = torch.where((tw * pc).sum(-1, keepdim=True) > 0, -tw, tw)
    feat = torch.cat([res, sub.albedo(), sub.roughness()[:, None], facing], -1)
    return Prepared(visible, mean2d, pc, a, b, tw, sub.opacities(), feat, tu, tv, scales)


def bin_splats(prep: Prepared, pinhole: Pinhole, tile_size: int = TILE_SIZE, margin: float = 1e-3):
    """Conservative tile lists, each in global center-depth order.

    The box around a splat covers the projection of its 3-sigma square (when
    all four corners are in front of the camera; the whole image otherwise)
    and the 3-sigma disc of the screen-space filter.
    """
    W, H = pinhole.width, pinhole.height
    tiles_x = (W + tile_size - 1) // tile_size
    tiles_y = (H + tile_size - 1) // tile_size
    n_tiles = tiles_x * tiles_y
    N = prep.pc.shape[0]
    if N == 0:
        return np.zeros(n_tiles + 1, dtype=np.int64), np.zeros(0, dtype=np.int64)
    pc = prep.pc.detach().double().numpy()
    tu = prep.tu.detach().double().numpy()
    tv = prep.tv.detach().double().numpy()
    s = prep.scales.detach().double().numpy()
    m2 = prep.mean2d.detach().double().numpy()
    r = math.sqrt(2 * SUPPORT)
    su = (r * s[:, 0])[:, None, None] * np.array([1, 1, -1, -1])[None, :, None] * tu[:, None, :]
    sv = (r * s[:, 1])[:, None, None] * np.array([1, -1, 1, -1])[None, :, None] * tv[:, None, :]
    corners = pc[:, None, :] + su + sv
    front = (corners[..., 2] > 1e-6).all(1)
    zc = np.where(corners[..., 2] > 1e-6, corners[..., 2], 1.0)
    cx = pinhole.fx * corners[..., 0] / zc + pinhole.cx
    cy = pinhole.fy * corners[..., 1] / zc + pinhole.cy
    rs = math.sqrt(SUPPORT)  # screen filter: d^2 / (2 sigma^2) <= SUPPORT
    x_lo = np.where(front, np.minimum(cx.min(1), m2[:, 0] - rs), 0.0) - margin
    x_hi = np.where(front, np.maximum(cx.max(1), m2[:, 0] + rs), W - 1.0) + margin
    y_lo = np.where(front, np.minimum(cy.min(1), m2[:, 1] - rs), 0.0) - margin
    y_hi = np.where(front, np.maximum(cy.max(1), m2[:, 1] + rs), H - 1.0) + margin
    with np.errstate(invalid="ignore"):
        px0 = np.clip(np.ceil(x_lo), 0, W - 1)
        px1 = np.clip(np.floor(x_hi), 0, W - 1)
        py0 = np.clip(np.ceil(y_lo), 0, H - 1)
        py1 = np.clip(np.floor(y_hi), 0, H - 1)
    hit = (x_hi >= 0) & (x_lo <= W - 1) & (y_hi >= 0) & (y_lo <= H - 1) & (px0 <= px1) & (py0 <= py1)
    tx0 = (px0 // tile_size).astype(np.int64)
    tx1 = (px1 // tile_size).astype(np.int64)
    ty0 = (py0 // tile_size).astype(np.int64)
    ty1 = (py1 // tile_size).astype(np.int64)
    nx = np.where(hit, tx1 - tx0 + 1, 0)
    ny = np.where(hit, ty1 - ty0 + 1, 0)
    order = np.lexsort((np.arange(N), pc[:, 2]))  # by center depth, ties by index
    counts = (nx * ny)[order]
    total = int(counts.sum())
    if total == 0:
        return np.zeros(n_tiles + 1, dtype=np.int64), np.zeros(0, dtype=np.int64)
    splat = np.repeat(order, counts)
    rank = np.repeat(np.arange(N), counts)
    first = np.repeat(np.cumsum(counts) - counts, counts)
    local = np.arange(total) - first
    nxs = nx[splat]
    tile = (ty0[splat] + local // nxs) * tiles_x + tx0[splat] + local % nxs
    key = np.argsort(tile * N + rank, kind="stable")
    tile_ids = splat[key].astype(np.int64)
    offsets = np.zeros(n_tiles + 1, dtype=np.int64)
    offsets[1:] = np.cumsum(np.bincount(tile, minlength=n_tiles))
    return offsets, tile_ids


# ---------------------------------------------------------------------------
# autograd bridge


class _Raster:
    """Per-call state shared between the autograd forward and backward."""

    def __init__(self, pinhole: Pinhole, offsets, ids, threads: int):
        self.pinhole = pinhole
        self.offsets = offsets
        self.ids = ids
        self.threads = threads
        self.n_proc = None
        self.signature = None


def _np(t: Tensor) -> np.ndarray:
    return np.ascontiguousarray(t.detach().to(torch.float64).numpy())


class _Blend(torch.autograd.Function):
    @staticmethod
    def forward(ctx, mean2d, pc, a, b, n, opac, feat, state: _Raster):
        K = state.pinhole
        arrs = [_np(x) for x in (mean2d, pc, a, b, n, opac, feat)]
        f, o, dn, dist, n_proc, sig = _backend.kernel.forward(
            *arrs, state.offsets, state.ids, K.width, K.height, K.fx, K.fy, K.cx, K.cy, TILE_SIZE, state.threads
        )
        state.n_proc = n_proc
        state.signature = sig
        ctx.state = state
        ctx.arrs = arrs
        ctx.dtype = feat.dtype
        cast = lambda x: torch.from_numpy(x).to(feat.dtype)  # noqa: E731
        return cast(f), cast(o), cast(dn), cast(dist)

    @staticmethod
    def backward(ctx, g_feat, g_o, g_dn, g_dist):
        st = ctx.state
        K = st.pinhole
        rows = _backend.kernel.backward(
            *ctx.arrs, st.offsets, st.ids, st.n_proc, _np(g_feat), _np(g_o), _np(g_dn), _np(g_dist),
            K.width, K.height, K.fx, K.fy, K.cx, K.cy, TILE_SIZE, st.threads,
        )
        rows = torch.from_numpy(rows).to(ctx.dtype)
        return rows[:, 0:2], rows[:, 2:5], rows[:, 5:8], rows[:, 8:11], rows[:, 11:14], rows[:, 14], rows[:, 15:], None


# ---------------------------------------------------------------------------
# G-buffer


@dataclass
class BlendRecord:
    """Dense per-pixel blend lists padded to K entries (zero weight = unused)."""

    index: Tensor  # [H, W, K] splat index, -1 where unused
    alpha: Tensor  # [H, W, K]
    weights: Tensor  # [H, W, K]
    depths: Tensor  # [H, W, K]
    normals: Tensor  # [H, W, K, 3] inherent splat normals t_w, camera frame
    omega_o: Optional[Tensor] = None  # broadcastable to normals; direction toward the camera


@dataclass
class GBuffer:
    C_g: Tensor  # [H, W, 3]
    B: Tensor  # [H, W, 3]
    R: Tensor  # [H, W]
    D: Tensor  # [H, W]
    O: Tensor  # [H, W]
    N: Tensor  # [H, W, 3] depth-derived normals, camera frame
    normal_blend: Tensor  # [H, W, 3] sum_i W_i n_i
    distortion: Tensor  # [H, W] sum over pairs of W_i W_j |z_i - z_j|
    view: CameraView
    blend: Optional[BlendRecord] = None
    signature: Optional[np.ndarray] = None
    normal_valid: Optional[Tensor] = None
    tiles: Optional[tuple] = None  # (visible splat indices, tile offsets, tile lists)

    @property
    def shape(self):
        return tuple(self.D.shape)

    def points_camera(self) -> Tensor:
        return self.D[..., None] * self.view.intrinsics.ray_grid(self.D.dtype)

    def points_world(self) -> Tensor:
        R, t = self.view.pose.torch(self.D.dtype)
        return (self.points_camera() - t) @ R

    def normals_world(self) -> Tensor:
        R, _ = self.view.pose.torch(self.D.dtype)
        return self.N @ R


def _central(x: Tensor, dim: int) -> Tensor:
    n = x.shape[dim]
    if n == 1:
        return torch.zeros_like(x)
    first = x.narrow(dim, 1, 1) - x.narrow(dim, 0, 1)
    last = x.narrow(dim, n - 1, 1) - x.narrow(dim, n - 2, 1)
    if n == 2:
        return torch.cat([first, last], dim)
    mid = 0.5 * (x.narrow(dim, 2, n - 2) - x.narrow(dim, 0, n - 2))
    return torch.cat([first, mid, last], dim)


def depth_to_normals(D: Tensor, pinhole: Pinhole):
    """Unit normals from a depth map via finite differences of unprojected points.

    Returns ``(N, valid)``; normals face the camera and fall back to
    ``(0, 0, -1)`` where the cross product vanishes.
    """
    X = D[..., None] * pinhole.ray_grid(D.dtype)
    dx = _central(X, 1)
    dy = _central(X, 0)
    c = torch.cross(dy, dx, dim=-1)
    sq = (c * c).sum(-1, keepdim=True)
    valid = sq > NORMAL_EPS**2
    norm = torch.sqrt(torch.where(valid, sq, torch.ones_like(sq)))
    fallback = torch.tensor([0.0, 0.0, -1.0], dtype=D.dtype).expand_as(c)
    return torch.where(valid, c / norm, fallback), valid[..., 0]


def _assemble(view, feat, O, Dn, dist, blend=None, signature=None) -> GBuffer:
    D = torch.where(O >= DEPTH_EPS, Dn / torch.where(O >= DEPTH_EPS, O, torch.ones_like(O)), torch.zeros_like(O))
    N, valid = depth_to_normals(D, view.intrinsics)
    return GBuffer(
        C_g=feat[..., CG], B=feat[..., ALB], R=feat[..., RGH][..., 0], D=D, O=O, N=N,
        normal_blend=feat[..., NRM], distortion=dist, view=view, blend=blend, signature=signature,
        normal_valid=valid,
    )


def _empty(splats: Splats, view: CameraView) -> GBuffer:
    K = view.intrinsics
    z = torch.zeros(K.height, K.width, dtype=splats.dtype)
    # keep the graph connected so callers can always backprop
    anchor = sum(p.sum() for p in splats.params().values()) * 0.0 if len(splats) else 0.0
    return _assemble(view, torch.zeros(K.height, K.width, N_FEAT, dtype=splats.dtype) + anchor, z, z, z,
                     signature=np.zeros((K.height, K.width), dtype=np.int64))


def render_gbuffer(splats: Splats, view: CameraView, threads: Optional[int] = None) -> GBuffer:
    """Rasterize surfel attributes for one camera with the tiled kernel."""
    prep = prepare(splats, view)
    if prep.pc.shape[0] == 0:
        return _empty(splats, view)
    offsets, ids = bin_splats(prep, view.intrinsics)
    state = _Raster(view.intrinsics, offsets, ids, threads or get_threads())
    feat, O, Dn, dist = _Blend.apply(prep.mean2d, prep.pc, prep.a, prep.b, prep.n, prep.opac, prep.feat, state)
    gb = _assemble(view, feat, O, Dn, dist, signature=state.signature)
    gb.tiles = (prep.index.numpy(), offsets, ids)
    return gb


from .brute import render_gbuffer_bruteforce  # noqa: E402
