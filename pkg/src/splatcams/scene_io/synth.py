"""Procedural ground-truth scenes and their rendered capture datasets."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import torch
from scipy.ndimage import gaussian_filter
from scipy.spatial.transform import Rotation

from ..core import PSF_SIZE, CameraView, Pinhole, Pose, ProjectorDevice, Splats, srgb_encode
from ..raster import render_gbuffer_bruteforce
from ..shading import projector_emit, shade
from .checkpoint import Checkpoint, save_checkpoint
from .dataset import Frame, SceneDataset, save_dataset
from .images import DataError

Y00 = 0.28209479177387814


@dataclass
class SyntheticSceneSpec:
    surface: str = "wave"  # plane | wave | dihedral
    extent: float = 2.0
    grid: int = 40  # splats per side
    wave_amplitude: float = 0.08
    wave_cycles: float = 1.5
    dihedral_angle: float = 30.0  # degrees each half is tilted
    albedo: str = "checker+noise"  # checker | noise | checker+noise
    albedo_cells: int = 5
    roughness: str = "gradient"  # uniform | gradient
    opacity: float = 0.95
    scale_factor: float = 0.7  # splat sigma relative to grid spacing
    n_views: int = 16
    ring_radius: float = 2.2
    ring_height: float = 2.3
    jitter: float = 0.05
    n_eval_views: int = 2
    image_size: int = 128
    camera_fov: float = 50.0
    projector_size: int = 128
    projector_position: Tuple[float, float, float] = (0.0, -0.5, 2.8)
    projector_fov: float = 42.0
    n_patterns: int = 4
    n_eval_patterns: int = 2
    ambient: float = 0.08  # residual light level; 0 disables the SH environment
    sh_degree: int = 2
    gamma: float = 2.0
    gain: float = 1.6
    psf_sigma: Optional[float] = None  # Gaussian defocus of the true projector
    seed: int = 0

    def validate(self) -> None:
        if self.n_views < 1 or self.n_patterns < 1:
            raise DataError("synthetic spec needs at least one view and one pattern")
        if self.surface not in ("plane", "wave", "dihedral"):
            raise DataError(f"unknown surface kind {self.surface!r}")
        if self.albedo not in ("checker", "noise", "checker+noise"):
            raise DataError(f"unknown albedo source {self.albedo!r}")
        if self.roughness not in ("uniform", "gradient"):
            raise DataError(f"unknown roughness layout {self.roughness!r}")
        if self.grid < 2 or self.image_size < 8 or self.projector_size < 8:
            raise DataError("grid, image_size and projector_size are too small")
        if not 0 <= self.sh_degree <= 3:
            raise DataError("sh_degree must be in 0..3")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSceneSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise DataError(f"unknown synthetic spec keys: {sorted(unknown)}")
        d = dict(d)
        if "projector_position" in d:
            d["projector_position"] = tuple(d["projector_position"])
        spec = cls(**d)
        spec.validate()
        return spec

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# geometry and materials


def _surface(spec: SyntheticSceneSpec, x, y):
    """Height ``z`` and its partial derivatives on the surface."""
    if spec.surface == "plane":
        return np.zeros_like(x), np.zeros_like(x), np.zeros_like(x)
    if spec.surface == "wave":
        k = 2 * math.pi * spec.wave_cycles / spec.extent
        a = spec.wave_amplitude
        z = a * np.sin(k * x) * np.cos(0.7 * k * y)
        return z, a * k * np.cos(k * x) * np.cos(0.7 * k * y), -0.7 * a * k * np.sin(k * x) * np.sin(0.7 * k * y)
    t = math.tan(math.radians(spec.dihedral_angle))
    return t * np.abs(x), t * np.sign(x), np.zeros_like(x)


def _albedo(spec: SyntheticSceneSpec, x, y, rng) -> np.ndarray:
    u = (x / spec.extent + 0.5) * spec.albedo_cells
    v = (y / spec.extent + 0.5) * spec.albedo_cells
    out = np.full(x.shape + (3,), 0.5)
    if "checker" in spec.albedo:
        odd = (np.floor(u) + np.floor(v)) % 2 == 1
        c0 = np.array([0.75, 0.6, 0.35])
        c1 = np.array([0.25, 0.4, 0.65])
        out = np.where(odd[..., None], c1, c0)
    if "noise" in spec.albedo:
        n = x.shape[0]
        noise = gaussian_filter(rng.normal(size=(n, n, 3)), sigma=(2.0, 2.0, 0))
        noise /= max(noise.std(), 1e-12)
        out = out + 0.08 * noise
    return np.clip(out, 0.05, 0.95)


def defocus_kernel(sigma: float) -> np.ndarray:
    r = np.arange(PSF_SIZE) - PSF_SIZE // 2
    g = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2 * sigma * sigma))
    return g / g.sum()


def ground_truth_model(spec: SyntheticSceneSpec, rng=None) -> Splats:
    rng = rng or np.random.default_rng(spec.seed)
    n = spec.grid
    lin = np.linspace(-spec.extent / 2, spec.extent / 2, n)
    x, y = np.meshgrid(lin, lin, indexing="ij")
    z, zx, zy = _surface(spec, x, y)
    tu = np.stack([np.ones_like(x), np.zeros_like(x), zx], -1)
    tu /= np.linalg.norm(tu, axis=-1, keepdims=True)
    nrm = np.stack([-zx, -zy, np.ones_like(x)], -1)
    nrm /= np.linalg.norm(nrm, axis=-1, keepdims=True)
    tv = np.cross(nrm, tu)
    frames = np.stack([tu, tv, nrm], -1).reshape(-1, 3, 3)
    xyzw = Rotation.from_matrix(frames).as_quat()
    quats = np.concatenate([xyzw[:, 3:], xyzw[:, :3]], 1)
    spacing = spec.extent / (n - 1)
    means = np.stack([x, y, z], -1).reshape(-1, 3)
    albedo = _albedo(spec, x, y, rng).reshape(-1, 3)
    if spec.roughness == "gradient":
        rough = 0.35 + 0.45 * (x.reshape(-1) / spec.extent + 0.5)
    else:
        rough = np.full(n * n, 0.6)
    k = (spec.sh_degree + 1) ** 2
    sh = np.zeros((n * n, k, 3))
    # residual = ambient light reflected by the albedo, plus a weak view-dependent lobe
    sh[:, 0, :] = (spec.ambient * albedo - 0.5) / Y00
    if spec.sh_degree >= 1 and spec.ambient > 0:
        sh[:, 1:4, :] = spec.ambient * 0.15 * rng.normal(size=(1, 3, 3))
    scales = np.full((n * n, 2), spec.scale_factor * spacing)
    return Splats.create(means, quats, scales, spec.opacity, albedo, rough, sh=sh, sh_degree=spec.sh_degree)


def camera_ring(spec: SyntheticSceneSpec, rng=None) -> Tuple[List[CameraView], List[CameraView]]:
    rng = rng or np.random.default_rng(spec.seed + 1)
    K = Pinhole.from_fov(spec.camera_fov, spec.image_size, spec.image_size)

    def place(phi, height, name):
        eye = np.array([spec.ring_radius * math.cos(phi), spec.ring_radius * math.sin(phi), height])
        eye = eye + spec.jitter * rng.normal(size=3)
        target = spec.jitter * rng.normal(size=3) * np.array([1, 1, 0])
        return CameraView(K, Pose.look_at(eye, target), name)

    train = [place(2 * math.pi * i / spec.n_views, spec.ring_height, f"view{i}") for i in range(spec.n_views)]
    evals = [place(2 * math.pi * (i + 0.5) / max(spec.n_eval_views, 1) + 0.3, spec.ring_height * 1.1,
                   f"view{spec.n_views + i}") for i in range(spec.n_eval_views)]
    return train, evals


def projector_device(spec: SyntheticSceneSpec) -> ProjectorDevice:
    K = Pinhole.from_fov(spec.projector_fov, spec.projector_size, spec.projector_size)
    pose = Pose.look_at(spec.projector_position, (0.0, 0.0, 0.0))
    psf = defocus_kernel(spec.psf_sigma) if spec.psf_sigma else None
    return ProjectorDevice.create(K, pose, gamma=spec.gamma, gain=spec.gain, psf=psf)


# ---------------------------------------------------------------------------
# patterns


def quantize(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def make_pattern(kind: str, size: int, rng) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    if kind == "noise":
        field_ = gaussian_filter(rng.uniform(size=(size, size, 3)), sigma=(size / 24, size / 24, 0))
        field_ = (field_ - field_.min()) / max(np.ptp(field_), 1e-12)
        return 0.05 + 0.9 * field_
    if kind == "checker":
        cell = int(rng.integers(size // 16, size // 8 + 1))
        odd = ((xs // cell + ys // cell) % 2)[..., None]
        c0, c1 = rng.uniform(0.0, 0.35, 3), rng.uniform(0.65, 1.0, 3)
        return np.where(odd > 0, c1, c0)
    if kind == "stripes":
        theta = rng.uniform(0, math.pi)
        period = rng.uniform(size / 12, size / 5)
        phase = (xs * math.cos(theta) + ys * math.sin(theta)) * 2 * math.pi / period
        color = rng.uniform(0.4, 1.0, 3)
        return (0.5 + 0.5 * np.sin(phase))[..., None] * color
    if kind == "blocks":
        out = np.full((size, size, 3), rng.uniform(0.1, 0.5))
        for _ in range(8):
            x0, y0 = rng.integers(0, size - size // 6, 2)
            w, h = rng.integers(size // 10, size // 3, 2)
            out[y0:y0 + h, x0:x0 + w] = rng.uniform(0, 1, 3)
        return out
    raise ValueError(f"unknown pattern kind {kind!r}")


PATTERN_KINDS = ("noise", "checker", "stripes", "blocks")


def make_patterns(n: int, size: int, rng) -> List[np.ndarray]:
    return [quantize(make_pattern(PATTERN_KINDS[i % len(PATTERN_KINDS)], size, rng)) for i in range(n)]


# ---------------------------------------------------------------------------
# dataset


def _render(gb, device, view, pattern: np.ndarray) -> np.ndarray:
    light = projector_emit(torch.as_tensor(pattern), device, psf_enabled=True)
    return shade(gb, light, view, device).image.numpy()


def synth_dataset(spec: SyntheticSceneSpec, out=None) -> Tuple[SceneDataset, Checkpoint]:
    """Build the ground-truth model and render every frame with the dense renderer.

    Captures and patterns are quantized to 8 bits in memory so the returned
    dataset equals what :func:`load_dataset` reads back from ``out``.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    splats = ground_truth_model(spec, rng)
    train_views, eval_views = camera_ring(spec, rng)
    device = projector_device(spec)
    patterns = make_patterns(spec.n_patterns, spec.projector_size, rng)
    eval_patterns = make_patterns(spec.n_eval_patterns, spec.projector_size, rng)
    black = np.zeros((spec.projector_size, spec.projector_size, 3))
    white = np.ones_like(black)
    cameras = train_views + eval_views
    frames, masks = [], {}
    with torch.no_grad():
        for v, view in enumerate(cameras):
            gb = render_gbuffer_bruteforce(splats, view, chunk=512)
            light = projector_emit(torch.as_tensor(white), device)
            masks[v] = (shade(gb, light, view, device).C_p > 1e-4).any(-1).numpy()
            if v < len(train_views):
                todo = [(p, False) for p in patterns] + [(black, True)]
                split = "train"
            else:
                todo = [(p, False) for p in eval_patterns]
                split = "eval"
            for i, (pat, is_black) in enumerate(todo):
                cap = quantize(_render(gb, device, view, pat))
                frames.append(Frame(v, pat, cap, split, is_black, i))
    ds = SceneDataset(cameras, device.intrinsics, device.pose, frames, masks)
    ds.validate()
    gt = Checkpoint(splats, device, cameras, 0, {"synthetic_spec": spec.to_dict()})
    if out is not None:
        out = Path(out)
        save_dataset(ds, out)
        save_checkpoint(gt, out / "gt.gspc")
        ds.root = out
    return ds, gt


def residual_only(gb) -> np.ndarray:
    """Tone-mapped residual term alone (what a black projection shows)."""
    return srgb_encode(gb.C_g.clamp_min(0)).clamp(0, 1).numpy()


__all__ = ["SyntheticSceneSpec", "synth_dataset", "ground_truth_model", "camera_ring", "projector_device",
           "make_patterns", "defocus_kernel", "residual_only"]
