"""Binary checkpoint: splats, projector response and registered cameras.

Layout (little endian)::

    b"GSPC"  u32 version
    u32 n_splats  u32 sh_degree  u32 n_gain  u32 n_cameras  u64 iteration
    f64 arrays: means, quats, log_scales, opacity_logits, sh, albedo_logits,
                roughness_logits, projector (intrinsics, pose, gamma, gain,
                psf), then per camera (intrinsics, pose)

Camera names and the training config live in a JSON sidecar next to the
binary file (``<file>.json``).
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch

from ..core import PSF_SIZE, CameraView, Pinhole, Pose, ProjectorDevice, Splats
from .images import DataError

MAGIC = b"GSPC"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIIQ")


@dataclass
class Checkpoint:
    splats: Splats
    device: ProjectorDevice
    cameras: List[CameraView] = field(default_factory=list)
    iteration: int = 0
    config: dict = field(default_factory=dict)

    @property
    def sh_degree(self) -> int:
        return self.splats.sh_degree

    def camera(self, key) -> CameraView:
        """Look a camera up by index or name."""
        if isinstance(key, int) or (isinstance(key, str) and key.isdigit()):
            i = int(key)
            if not 0 <= i < len(self.cameras):
                raise DataError(f"view {i} not registered (checkpoint has {len(self.cameras)} cameras)")
            return self.cameras[i]
        for cam in self.cameras:
            if cam.name == key:
                return cam
        raise DataError(f"view {key!r} not registered in checkpoint")


def _pinhole_vec(k: Pinhole) -> list:
    return [k.fx, k.fy, k.cx, k.cy, float(k.width), float(k.height)]


def _pose_vec(p: Pose) -> list:
    return list(p.rotation) + list(p.translation)


def _f64(t) -> bytes:
    if isinstance(t, torch.Tensor):
        t = t.detach().cpu().to(torch.float64).numpy()
    return np.ascontiguousarray(t, dtype="<f8").tobytes()


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    sp = ckpt.splats
    dev = ckpt.device
    header = _HEADER.pack(MAGIC, VERSION, len(sp), sp.sh_degree, dev.gain_raw.numel(), len(ckpt.cameras),
                          int(ckpt.iteration))
    chunks = [header]
    chunks += [_f64(v) for v in sp.params().values()]
    chunks.append(_f64(np.array(_pinhole_vec(dev.intrinsics) + _pose_vec(dev.pose))))
    chunks += [_f64(dev.gamma_raw), _f64(dev.gain_raw), _f64(dev.psf_raw)]
    for cam in ckpt.cameras:
        chunks.append(_f64(np.array(_pinhole_vec(cam.intrinsics) + _pose_vec(cam.pose))))
    Path(path).write_bytes(b"".join(chunks))
    meta = {
        "format": "GSPC", "version": VERSION, "iteration": int(ckpt.iteration), "n_splats": len(sp),
        "sh_degree": sp.sh_degree, "cameras": [c.name for c in ckpt.cameras], "config": ckpt.config,
    }
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _pinhole_from(v) -> Pinhole:
    return Pinhole(float(v[0]), float(v[1]), float(v[2]), float(v[3]), int(v[4]), int(v[5]))


def _pose_from(v) -> Pose:
    return Pose(np.array(v[:4]), np.array(v[4:7]))


def load_checkpoint(path, dtype=torch.float64) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing checkpoint: {path}")
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise DataError(f"{path}: truncated checkpoint header")
    magic, version, n, degree, n_gain, n_cam, iteration = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    if degree > 3 or n_gain not in (1, 3):
        raise DataError(f"{path}: corrupt header (sh_degree={degree}, n_gain={n_gain})")
    k = (degree + 1) ** 2
    head = [n * 3, n * 4, n * 2, n, n * k * 3, n * 3, n, 13, 1, n_gain, PSF_SIZE * PSF_SIZE]
    # check the size before allocating anything from header counts
    expected = _HEADER.size + 8 * (sum(head) + 13 * n_cam)
    if len(data) != expected:
        raise DataError(f"{path}: size {len(data)} bytes, header implies {expected}")
    sizes = head + [13] * n_cam
    flat = np.frombuffer(data, dtype="<f8", offset=_HEADER.size)
    parts, pos = [], 0
    for s in sizes:
        parts.append(flat[pos:pos + s].copy())
        pos += s
    if not all(np.isfinite(p).all() for p in parts):
        raise DataError(f"{path}: checkpoint contains non-finite values")
    t = lambda a, *shape: torch.as_tensor(a.reshape(*shape), dtype=dtype)  # noqa: E731
    try:
        splats = Splats(t(parts[0], n, 3), t(parts[1], n, 4), t(parts[2], n, 2), t(parts[3], n),
                        t(parts[4], n, k, 3), t(parts[5], n, 3), t(parts[6], n))
        pv = parts[7]
        device = ProjectorDevice(_pinhole_from(pv[:6]), _pose_from(pv[6:]), t(parts[8], 1), t(parts[9], n_gain),
                                 t(parts[10], PSF_SIZE, PSF_SIZE))
        meta = _read_sidecar(path)
        names = meta.get("cameras", [])
        cams = []
        for i, v in enumerate(parts[11:]):
            name = names[i] if i < len(names) else f"view{i}"
            cams.append(CameraView(_pinhole_from(v[:6]), _pose_from(v[6:]), name))
    except ValueError as exc:
        raise DataError(f"{path}: invalid device data: {exc}") from exc
    return Checkpoint(splats, device, cams, int(iteration), meta.get("config", {}))


def _read_sidecar(path: Path) -> dict:
    side = sidecar_path(path)
    if not side.is_file():
        return {}
    try:
        return json.loads(side.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{side}: malformed JSON sidecar: {exc}") from exc


def checkpoint_from(splats: Splats, device: ProjectorDevice, cameras=(), iteration: int = 0,
                    config: Optional[dict] = None) -> Checkpoint:
    return Checkpoint(splats.detach(), device.detach(), list(cameras), iteration, dict(config or {}))
