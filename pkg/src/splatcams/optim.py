"""Joint optimization of surfels and projector response from captures."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np
import torch
from scipy.ndimage import distance_transform_edt
from scipy.spatial import cKDTree

from .core import (NEAR_PLANE, NumericalError, ProjectorDevice, Splats, identity_psf_logits,
                   quat_to_rotmat, rotmat_to_quat)
from .diff import backward
from .losses import LossWeights, compute_terms, total
from .raster import set_threads
from .scene_io.checkpoint import Checkpoint, load_checkpoint
from .scene_io.dataset import SceneDataset
from .scene_io.images import DataError
from .scene_io.metrics import psnr
from .shading import simulate

log = logging.getLogger(__name__)

NDC_NEAR = 0.2

DEFAULT_LR = {
    "means": 1.6e-4, "quats": 1e-3, "log_scales": 5e-3, "opacity_logits": 5e-2, "sh": 2.5e-3,
    "albedo_logits": 5e-3, "roughness_logits": 5e-3, "gamma_raw": 1e-3, "gain_raw": 1e-3, "psf_raw": 1e-3,
}


@dataclass
class TrainConfig:
    iterations: int = 20000
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    lr: Dict[str, float] = field(default_factory=lambda: dict(DEFAULT_LR))
    lr_means_final: float = 1.6e-6
    prune_interval: int = 500
    prune_opacity: float = 0.005
    mask_dilation: int = 8
    densify: bool = False
    densify_interval: int = 500
    densify_until: Optional[int] = None
    densify_grad_threshold: float = 2e-4
    use_mask: bool = False
    psf_enabled: bool = True
    weights: LossWeights = field(default_factory=LossWeights)
    # Distortion depths are divided by this; None picks z_ref^2 / NDC_NEAR,
    # i.e. NDC depth linearized at the median scene depth.
    depth_scale: Optional[float] = None
    distortion_start: float = 0.1  # fraction of iterations before the term switches on
    normal_start: float = 0.25
    eval_interval: int = 500
    seed: int = 0
    threads: int = 1
    dtype: str = "f64"

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.betas = tuple(self.betas)
        merged = dict(DEFAULT_LR)
        merged.update(self.lr)
        self.lr = merged
        self.validate()

    def validate(self) -> None:
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        bad = [k for k, v in self.lr.items() if not v > 0]
        if bad or not self.lr_means_final > 0:
            raise ValueError(f"learning rates must be positive: {bad or ['lr_means_final']}")
        if self.depth_scale is not None and not self.depth_scale > 0:
            raise ValueError("depth_scale must be positive")
        if not (0 <= self.distortion_start <= 1 and 0 <= self.normal_start <= 1):
            raise ValueError("regularizer starts must be fractions in [0, 1]")
        if not (0 <= self.betas[0] < 1 and 0 <= self.betas[1] < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.dtype not in ("f32", "f64"):
            raise ValueError("dtype must be f32 or f64")

    @property
    def torch_dtype(self):
        return torch.float64 if self.dtype == "f64" else torch.float32

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


# ---------------------------------------------------------------------------
# Adam


def adam_step(param, grad, m, v, t: int, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
    """One bias-corrected Adam update; returns ``(param, m, v)``."""
    b1, b2 = betas
    m = b1 * m + (1 - b1) * grad
    v = b2 * v + (1 - b2) * grad * grad
    m_hat = m / (1 - b1**t)
    v_hat = v / (1 - b2**t)
    return param - lr * m_hat / (torch.sqrt(v_hat) + eps), m, v


class Adam:
    """Adam over named tensors with per-name learning rates."""

    def __init__(self, params: Dict[str, torch.Tensor], lr: Dict[str, float], betas=(0.9, 0.999), eps=1e-8):
        self.lr = dict(lr)
        self.betas = tuple(betas)
        self.eps = eps
        self.t = 0
        self.m = {k: torch.zeros_like(p) for k, p in params.items()}
        self.v = {k: torch.zeros_like(p) for k, p in params.items()}

    def step(self, params: Dict[str, torch.Tensor], grads: Dict[str, torch.Tensor],
             lr_override: Optional[Dict[str, float]] = None) -> Dict[str, torch.Tensor]:
        self.t += 1
        lrs = {**self.lr, **(lr_override or {})}
        out = {}
        for k, p in params.items():
            g = grads.get(k)
            if g is None:
                g = torch.zeros_like(p)
            if not bool(torch.isfinite(g).all()):
                raise NumericalError(f"Adam step {self.t}", f"non-finite gradient for {k}")
            new, self.m[k], self.v[k] = adam_step(p.detach(), g, self.m[k], self.v[k], self.t, lrs[k],
                                                  self.betas, self.eps)
            out[k] = new
        return out

    def select(self, names, keep: torch.Tensor) -> None:
        for k in names:
            self.m[k] = self.m[k][keep]
            self.v[k] = self.v[k][keep]

    def extend(self, names, extra: int) -> None:
        for k in names:
            pad = torch.zeros((extra,) + tuple(self.m[k].shape[1:]), dtype=self.m[k].dtype)
            self.m[k] = torch.cat([self.m[k], pad])
            self.v[k] = torch.cat([self.v[k], pad])


def means_lr(step: int, total_steps: int, lr0: float, lr1: float) -> float:
    """Log-linear decay from ``lr0`` at step 0 to ``lr1`` at the last step."""
    frac = min(max(step / max(total_steps - 1, 1), 0.0), 1.0)
    return math.exp((1 - frac) * math.log(lr0) + frac * math.log(lr1))


# ---------------------------------------------------------------------------
# initialization


def init_splats(mode: str, points=None, plane: Optional[dict] = None, checkpoint=None, sh_degree: int = 2,
                dataset: Optional[SceneDataset] = None, k_neighbors: int = 3, dtype=torch.float64) -> Splats:
    """Initial surfels.

    ``from-points``: one surfel per point, scale = mean distance to the
    ``k_neighbors`` nearest points, normal from local PCA (turned toward the
    cameras when a dataset is given). ``grid-on-plane``: ``plane`` holds
    ``center``, ``normal``, ``size`` and ``count`` (per side).
    ``from-checkpoint``: the splats of a checkpoint path or object.
    """
    if mode == "from-checkpoint":
        ck = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint, dtype=dtype)
        return ck.splats.detach().to(dtype)
    if mode == "grid-on-plane":
        plane = plane or {}
        center = np.asarray(plane.get("center", (0.0, 0.0, 0.0)), dtype=np.float64)
        normal = np.asarray(plane.get("normal", (0.0, 0.0, 1.0)), dtype=np.float64)
        normal = normal / np.linalg.norm(normal)
        size, count = float(plane.get("size", 2.0)), int(plane.get("count", 10))
        tu, tv = _plane_axes(normal)
        lin = np.linspace(-size / 2, size / 2, count) if count > 1 else np.zeros(1)
        a, b = np.meshgrid(lin, lin, indexing="ij")
        pts = center + a.reshape(-1, 1) * tu + b.reshape(-1, 1) * tv
        spacing = size / (count - 1) if count > 1 else size
        frame = np.stack([tu, tv, normal], 1)
        quats = np.repeat(_quat_from_frame(frame)[None], len(pts), 0)
        return _fresh(pts, quats, np.full(len(pts), spacing), sh_degree, dtype)
    if mode == "from-points":
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(pts) == 0:
            raise DataError("point cloud is empty")
        scales, normals = _point_stats(pts, k_neighbors)
        if dataset is not None:
            eye = np.mean([c.pose.center for c in dataset.cameras], 0)
            flip = ((eye - pts) * normals).sum(1) < 0
            normals[flip] *= -1
        quats = np.stack([_quat_from_frame(np.stack([*_plane_axes(n), n], 1)) for n in normals])
        return _fresh(pts, quats, scales, sh_degree, dtype)
    raise ValueError(f"unknown init mode {mode!r}")


def _plane_axes(normal: np.ndarray):
    ref = np.array([1.0, 0.0, 0.0]) if abs(normal[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    tu = ref - normal * (ref @ normal)
    tu /= np.linalg.norm(tu)
    return tu, np.cross(normal, tu)


def _quat_from_frame(frame: np.ndarray) -> np.ndarray:
    return rotmat_to_quat(frame)


def _point_stats(pts: np.ndarray, k: int):
    n = len(pts)
    normals = np.tile([0.0, 0.0, 1.0], (n, 1))
    if n == 1:
        return np.array([0.01]), normals
    tree = cKDTree(pts)
    kk = min(k, n - 1)
    dist, _ = tree.query(pts, kk + 1)
    scales = dist[:, 1:].mean(1)
    if n >= 3:
        _, idx = tree.query(pts, min(8, n))
        for i in range(n):
            nb = pts[idx[i]] - pts[idx[i]].mean(0)
            w, vecs = np.linalg.eigh(nb.T @ nb)
            if w[1] > 1e-18:
                normals[i] = vecs[:, 0] if vecs[2, 0] >= 0 else -vecs[:, 0]
    return scales, normals


def _fresh(pts, quats, scale, sh_degree, dtype) -> Splats:
    n = len(pts)
    scale = np.maximum(np.asarray(scale, dtype=np.float64), 1e-6)
    return Splats.create(pts, quats, np.stack([scale, scale], 1), 0.5, 0.5, 0.5,
                         sh=np.zeros((n, (sh_degree + 1) ** 2, 3)), dtype=dtype)


def perturb_splats(splats: Splats, position_sigma: float, seed: int = 0, reset_materials: bool = True,
                   reset_sh: bool = False) -> Splats:
    """Jitter centers with Gaussian noise and optionally reset albedo/roughness to 0.5."""
    rng = np.random.default_rng(seed)
    out = splats.detach()
    noise = torch.as_tensor(rng.normal(0, position_sigma, tuple(out.means.shape)), dtype=out.dtype)
    out.means = out.means + noise
    if reset_materials:
        out.albedo_logits = torch.zeros_like(out.albedo_logits)
        out.roughness_logits = torch.zeros_like(out.roughness_logits)
    if reset_sh:
        out.sh = torch.zeros_like(out.sh)
    return out


def default_device(intrinsics, pose, gain_channels: int = 1, psf_sharpness: float = 5.0,
                   dtype=torch.float64) -> ProjectorDevice:
    """Untrained projector: gamma 2.2, gain 1, center-favoring PSF."""
    dev = ProjectorDevice.create(intrinsics, pose, gamma=2.2, gain=[1.0] * gain_channels, dtype=dtype)
    dev.psf_raw = identity_psf_logits(psf_sharpness, dtype=dtype)
    return dev


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    metrics: List[dict]
    initial_psnr: Optional[float] = None
    final_psnr: Optional[float] = None


class _FrameCache:
    def __init__(self, ds: SceneDataset, dtype, dilation: int):
        t = lambda a: torch.as_tensor(a, dtype=dtype)  # noqa: E731
        self.train = [f for f in ds.frames if f.split == "train"]
        self.eval = [f for f in ds.frames if f.split == "eval"]
        self.patterns = {id(f): t(f.pattern) for f in ds.frames}
        self.captures = {id(f): t(f.capture) for f in ds.frames}
        self.masks = {v: torch.as_tensor(m) for v, m in ds.masks.items()}
        self.dilated = {v: distance_transform_edt(~m) <= dilation for v, m in ds.masks.items()}


def evaluate(splats: Splats, device: ProjectorDevice, ds: SceneDataset, frames=None, psf_enabled: bool = True,
             masked: bool = True) -> float:
    """Mean PSNR over frames (eval split by default), restricted to view masks when present."""
    frames = ds.split("eval") if frames is None else frames
    if not frames:
        return float("nan")
    vals = []
    with torch.no_grad():
        for f in frames:
            out, _ = simulate(splats, device, ds.cameras[f.view], torch.as_tensor(f.pattern, dtype=splats.dtype),
                              psf_enabled=psf_enabled)
            m = ds.masks.get(f.view) if masked else None
            vals.append(min(psnr(out.image.double().numpy(), f.capture, m), 100.0))
    return float(np.mean(vals))


def prune_mask(splats: Splats, cfg: TrainConfig, ds: SceneDataset, dilated: Dict[int, np.ndarray]) -> torch.Tensor:
    """Boolean keep-mask: opacity above threshold and (with masks) inside some view's dilated mask."""
    keep = splats.opacities().detach() >= cfg.prune_opacity
    if cfg.use_mask and dilated:
        means = splats.means.detach().double().numpy()
        inside = np.zeros(len(means), dtype=bool)
        for v, dm in dilated.items():
            cam = ds.cameras[v]
            xc = cam.pose.apply(means)
            z = xc[:, 2]
            ok = z > NEAR_PLANE
            zs = np.where(ok, z, 1.0)
            K = cam.intrinsics
            u = np.round(K.fx * xc[:, 0] / zs + K.cx).astype(np.int64)
            w = np.round(K.fy * xc[:, 1] / zs + K.cy).astype(np.int64)
            ok &= (u >= 0) & (u < K.width) & (w >= 0) & (w < K.height)
            hit = np.zeros(len(means), dtype=bool)
            hit[ok] = dm[w[ok], u[ok]]
            inside |= hit
        keep &= torch.as_tensor(inside)
    return keep


def _densify(splats: Splats, opt: Adam, grad_accum: torch.Tensor, count: torch.Tensor, cfg: TrainConfig,
             rng: np.random.Generator) -> Splats:
    avg = grad_accum / count.clamp_min(1)
    pick = (avg > cfg.densify_grad_threshold).nonzero().squeeze(1)
    if len(pick) == 0:
        return splats
    base = splats.select(pick).detach()
    scales = base.scales()
    big = scales.max(1).values > 1.5 * splats.scales().median()
    # large splats are split (new one offset along the tangent plane, both shrunk); small ones cloned
    rot = quat_to_rotmat(base.quats)
    offs = torch.as_tensor(rng.normal(size=(len(pick), 2)), dtype=splats.dtype) * scales
    shift = (rot[..., 0] * offs[:, :1] + rot[..., 1] * offs[:, 1:]) * big[:, None]
    new = base.map(lambda t: t.clone())
    new.means = base.means + shift
    shrink = torch.where(big[:, None], torch.full_like(scales, math.log(1.6)), torch.zeros_like(scales))
    new.log_scales = base.log_scales - shrink
    params = splats.detach().params()
    params["log_scales"] = params["log_scales"].clone()
    params["log_scales"][pick] = params["log_scales"][pick] - shrink
    merged = Splats(**{k: torch.cat([params[k], getattr(new, k)]) for k in params})
    opt.extend(params.keys(), len(pick))
    return merged


def reference_depth(splats: Splats, cameras) -> float:
    """Median over cameras of the depth of the splat centroid."""
    c = splats.means.detach().mean(0).cpu().numpy()
    z = [float(cam.pose.apply(c[None])[0, 2]) for cam in cameras]
    return float(np.median(z))


def resolve_depth_scale(cfg: TrainConfig, splats: Splats, cameras) -> float:
    if cfg.depth_scale is not None:
        return cfg.depth_scale
    z = reference_depth(splats, cameras)
    if not z > NDC_NEAR:
        return 1.0
    return z * z / NDC_NEAR


def _step_weights(cfg: TrainConfig, step: int, depth_scale: float) -> LossWeights:
    w = cfg.weights
    depth = w.depth / depth_scale if step > cfg.distortion_start * cfg.iterations else 0.0
    normal = w.normal if step > cfg.normal_start * cfg.iterations else 0.0
    return LossWeights(w.lam, depth, normal, w.material, w.entropy)


def train(ds: SceneDataset, splats: Splats, device: ProjectorDevice, cfg: TrainConfig,
          metrics_path=None, progress: Optional[Callable[[dict], None]] = None,
          cameras_for_checkpoint=None) -> TrainResult:
    """Optimize ``splats`` and ``device`` against the training frames of ``ds``."""
    train_frames = ds.split("train")
    if not train_frames:
        raise DataError("dataset has no training frames")
    if len(ds.train_views) < 2:
        log.warning("training from a single view; geometry will be poorly constrained")
    if cfg.use_mask and not ds.masks:
        raise DataError("use_mask requested but the dataset has no masks")
    torch.set_num_threads(1)
    set_threads(cfg.threads)
    dtype = cfg.torch_dtype
    cache = _FrameCache(ds, dtype, cfg.mask_dilation)
    splats = splats.detach().to(dtype)
    device = device.detach().to(dtype)
    params = {**splats.params(), **device.params()}
    opt = Adam(params, cfg.lr, cfg.betas, cfg.eps)
    rng = np.random.default_rng(cfg.seed)
    depth_scale = resolve_depth_scale(cfg, splats, [ds.cameras[v] for v in ds.train_views])
    splat_keys = list(splats.params().keys())
    metrics: List[dict] = []
    grad_accum = torch.zeros(len(splats), dtype=dtype)
    grad_count = torch.zeros(len(splats), dtype=dtype)
    initial = evaluate(splats, device, ds, psf_enabled=cfg.psf_enabled) if ds.split("eval") else None
    t0 = time.perf_counter()
    for step in range(1, cfg.iterations + 1):
        frame = train_frames[int(rng.integers(len(train_frames)))]
        view = ds.cameras[frame.view]
        splats.requires_grad_()
        device.requires_grad_()
        out, gb = simulate(splats, device, view, cache.patterns[id(frame)], psf_enabled=cfg.psf_enabled)
        mask = cache.masks.get(frame.view) if cfg.use_mask else None
        terms = compute_terms(out.image, cache.captures[id(frame)], gb, cfg.weights, mask=mask)
        loss = total(terms, _step_weights(cfg, step, depth_scale), mask_available=mask is not None)
        grads = backward(loss, splats, device).all()
        if cfg.densify:
            grad_accum += grads["means"].norm(dim=-1)
            grad_count += (grads["means"].abs().sum(-1) > 0).to(dtype)
        lr_now = {"means": means_lr(step - 1, cfg.iterations, cfg.lr["means"], cfg.lr_means_final)}
        if not cfg.psf_enabled:
            grads["psf_raw"] = torch.zeros_like(device.psf_raw)
        new = opt.step({k: v.detach() for k, v in params.items()}, grads, lr_now)
        splats = Splats(**{k: new[k] for k in splat_keys})
        device = ProjectorDevice(device.intrinsics, device.pose, new["gamma_raw"], new["gain_raw"], new["psf_raw"])
        if cfg.densify and step % cfg.densify_interval == 0 and step < (cfg.densify_until or cfg.iterations // 2):
            splats = _densify(splats, opt, grad_accum, grad_count, cfg, rng)
            grad_accum = torch.zeros(len(splats), dtype=dtype)
            grad_count = torch.zeros(len(splats), dtype=dtype)
        if cfg.prune_interval and step % cfg.prune_interval == 0:
            keep = prune_mask(splats, cfg, ds, cache.dilated)
            if not bool(keep.all()):
                splats = splats.select(keep)
                opt.select(splat_keys, keep)
                grad_accum, grad_count = grad_accum[keep], grad_count[keep]
        params = {**splats.params(), **device.params()}
        row = {"step": step, "loss": float(loss.detach())}
        row.update({k: float(v.detach()) for k, v in terms.items()})
        if cfg.eval_interval and (step % cfg.eval_interval == 0 or step == cfg.iterations) and ds.split("eval"):
            row["psnr"] = evaluate(splats, device, ds, psf_enabled=cfg.psf_enabled)
            row["n_splats"] = len(splats)
            row["elapsed"] = time.perf_counter() - t0
            if progress:
                progress(row)
        metrics.append(row)
    final = evaluate(splats, device, ds, psf_enabled=cfg.psf_enabled) if ds.split("eval") else None
    cams = cameras_for_checkpoint if cameras_for_checkpoint is not None else ds.cameras
    ckpt = Checkpoint(splats.detach(), device.detach(), list(cams), cfg.iterations, cfg.to_dict())
    if metrics_path is not None:
        write_metrics(metrics, metrics_path)
    return TrainResult(ckpt, metrics, initial, final)


METRIC_COLUMNS = ["step", "loss", "color", "distortion", "normal", "material", "entropy", "psnr"]


def write_metrics(rows: List[dict], path) -> None:
    with open(Path(path), "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=METRIC_COLUMNS, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else (min(r[k], 100.0) if k == "psnr" else r[k]))
                        for k in METRIC_COLUMNS})
