"""Domain types and closed-form geometry.

Conventions used throughout the package:

* quaternions are stored ``(w, x, y, z)``;
* a :class:`Pose` maps world points into the device frame, ``x_dev = R x_world + t``;
* device frames are x-right, y-down, z-forward;
* integer pixel coordinates address pixel *centres*, so pixel ``(col, row)``
  has image coordinate ``(col, row)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from torch import Tensor

NEAR_PLANE = 0.01
PROJECT_EPS = 1e-6

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)

PSF_SIZE = 5


# ---------------------------------------------------------------------------
# quaternion helpers


def quat_normalize(q):
    if isinstance(q, Tensor):
        return q / q.norm(dim=-1, keepdim=True)
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_to_rotmat(q):
    """Rotation matrices for (normalized) quaternions ``[..., 4]`` -> ``[..., 3, 3]``."""
    lib = torch if isinstance(q, Tensor) else np
    q = quat_normalize(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    rows = [
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ]
    m = lib.stack(rows, -1)
    return m.reshape(*m.shape[:-1], 3, 3)


def rotmat_to_quat(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    tr = np.trace(m)
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif m[1, 1] > m[2, 2]:
        s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])


def tangent_frame(q):
    """Orthonormal splat frame ``(t_u, t_v, t_w)`` from a quaternion.

    Non-unit input is normalized first. ``t_w = t_u x t_v`` by construction
    because the columns of a proper rotation matrix form a right-handed basis.
    """
    r = quat_to_rotmat(q)
    return r[..., :, 0], r[..., :, 1], r[..., :, 2]


class NumericalError(RuntimeError):
    """Non-finite values appeared somewhere in the pipeline."""

    def __init__(self, stage: str, detail: str = ""):
        self.stage = stage
        super().__init__(f"non-finite values produced by {stage}" + (f": {detail}" if detail else ""))


def check_finite(stage: str, **tensors) -> None:
    for name, t in tensors.items():
        if t is not None and not bool(torch.isfinite(t).all()):
            raise NumericalError(stage, name)


# ---------------------------------------------------------------------------
# devices


@dataclass(frozen=True)
class Pose:
    """World -> device rigid transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n == 0:
            raise ValueError("pose rotation must be a non-zero quaternion")
        object.__setattr__(self, "rotation", q / n)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.array([1.0, 0, 0, 0]), np.zeros(3))

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0)) -> "Pose":
        """Pose of a device at ``eye`` whose optical axis points at ``target``."""
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        up = np.asarray(up, dtype=np.float64)
        right = np.cross(fwd, up)
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(fwd, [0.0, 1.0, 0.0])
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        r = np.stack([right, down, fwd])  # rows: device axes in world coordinates
        return cls(rotmat_to_quat(r), -r @ eye)

    @property
    def matrix(self) -> np.ndarray:
        return quat_to_rotmat(self.rotation)

    @property
    def center(self) -> np.ndarray:
        return -self.matrix.T @ self.translation

    def apply(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x) @ self.matrix.T + self.translation

    def inverse(self) -> "Pose":
        rt = self.matrix.T
        return Pose(rotmat_to_quat(rt), -rt @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``: apply ``other`` first."""
        r = self.matrix @ other.matrix
        return Pose(rotmat_to_quat(r), self.matrix @ other.translation + self.translation)

    def torch(self, dtype=torch.float64):
        return (torch.as_tensor(self.matrix, dtype=dtype), torch.as_tensor(self.translation, dtype=dtype))


@dataclass(frozen=True)
class Pinhole:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @classmethod
    def from_fov(cls, fov_deg: float, width: int, height: int) -> "Pinhole":
        f = 0.5 * width / math.tan(math.radians(fov_deg) / 2)
        return cls(f, f, (width - 1) / 2, (height - 1) / 2, width, height)

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def ray_grid(self, dtype=torch.float64) -> Tensor:
        """Un-normalized camera-space ray directions with unit z, ``[H, W, 3]``."""
        ys, xs = torch.meshgrid(
            torch.arange(self.height, dtype=dtype), torch.arange(self.width, dtype=dtype), indexing="ij"
        )
        return torch.stack([(xs - self.cx) / self.fx, (ys - self.cy) / self.fy, torch.ones_like(xs)], -1)

    def to_dict(self) -> dict:
        return dict(fx=self.fx, fy=self.fy, cx=self.cx, cy=self.cy, width=self.width, height=self.height)


@dataclass(frozen=True)
class CameraView:
    """A camera with fixed sRGB tone mapping (not learnable)."""

    intrinsics: Pinhole
    pose: Pose
    name: str = ""


def project(pinhole: Pinhole, pose: Pose, x_world) -> Optional[tuple]:
    """Project a world point; ``None`` is the not-visible sentinel."""
    xc = pose.apply(np.asarray(x_world, dtype=np.float64))
    if xc[2] <= PROJECT_EPS:
        return None
    px = np.array([pinhole.fx * xc[0] / xc[2] + pinhole.cx, pinhole.fy * xc[1] / xc[2] + pinhole.cy])
    return px, float(xc[2])


def unproject(pinhole: Pinhole, pose: Pose, pixel, depth: float) -> np.ndarray:
    pixel = np.asarray(pixel, dtype=np.float64)
    xc = np.array([(pixel[0] - pinhole.cx) / pinhole.fx * depth, (pixel[1] - pinhole.cy) / pinhole.fy * depth, depth])
    return pose.inverse().apply(xc)


# ---------------------------------------------------------------------------
# spherical harmonics


def sh_basis(dirs: Tensor, degree: int) -> Tensor:
    """Real SH basis values ``[..., (degree+1)**2]`` at unit directions."""
    if not 0 <= degree <= 3:
        raise ValueError("SH degree must be in 0..3")
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    out = [torch.full_like(x, SH_C0)]
    if degree > 0:
        out += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree > 1:
        xx, yy, zz = x * x, y * y, z * z
        out += [
            SH_C2[0] * x * y,
            SH_C2[1] * y * z,
            SH_C2[2] * (2 * zz - xx - yy),
            SH_C2[3] * x * z,
            SH_C2[4] * (xx - yy),
        ]
    if degree > 2:
        out += [
            SH_C3[0] * y * (3 * xx - yy),
            SH_C3[1] * x * y * z,
            SH_C3[2] * y * (4 * zz - xx - yy),
            SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy),
            SH_C3[4] * x * (4 * zz - xx - yy),
            SH_C3[5] * z * (xx - yy),
            SH_C3[6] * x * (xx - 3 * yy),
        ]
    return torch.stack(out, -1)


def sh_degree_of(n_coeffs: int) -> int:
    d = int(round(math.sqrt(n_coeffs))) - 1
    if (d + 1) ** 2 != n_coeffs or not 0 <= d <= 3:
        raise ValueError(f"{n_coeffs} is not a valid SH coefficient count")
    return d


def sh_eval(coeffs: Tensor, dirs: Tensor) -> Tensor:
    """Pre-offset SH color. ``coeffs`` is ``[..., (L+1)**2, 3]``, ``dirs`` ``[..., 3]``."""
    basis = sh_basis(dirs, sh_degree_of(coeffs.shape[-2]))
    return (basis.unsqueeze(-1) * coeffs).sum(-2)


def residual_color(coeffs: Tensor, dirs: Tensor) -> Tensor:
    return torch.clamp_min(sh_eval(coeffs, dirs) + 0.5, 0.0)


# ---------------------------------------------------------------------------
# tone curves


def srgb_encode(x: Tensor) -> Tensor:
    """Piecewise sRGB transfer, linear -> display. Defined for ``x >= 0``."""
    safe = torch.clamp_min(x, 0.0031308)
    return torch.where(x <= 0.0031308, 12.92 * x, 1.055 * safe ** (1 / 2.4) - 0.055)


def srgb_decode(v: Tensor) -> Tensor:
    safe = torch.clamp_min(v, 0.04045)
    return torch.where(v <= 0.04045, v / 12.92, ((safe + 0.055) / 1.055) ** 2.4)


# ---------------------------------------------------------------------------
# parameter containers


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass
class SplatPrimitive:
    """One surfel in raw (pre-activation) parameterization."""

    center: np.ndarray
    quat: np.ndarray
    log_scale: np.ndarray
    opacity_logit: float
    sh: np.ndarray
    albedo_logit: np.ndarray
    roughness_logit: float

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    @property
    def opacity(self) -> float:
        return float(1 / (1 + np.exp(-self.opacity_logit)))


def splat_point(primitive: SplatPrimitive, uv) -> np.ndarray:
    """World point at splat-local coordinates ``uv``."""
    tu, tv, _ = tangent_frame(np.asarray(primitive.quat, dtype=np.float64))
    s = primitive.scale
    return np.asarray(primitive.center, dtype=np.float64) + s[0] * tu * uv[0] + s[1] * tv * uv[1]


SPLAT_FIELDS = ("means", "quats", "log_scales", "opacity_logits", "sh", "albedo_logits", "roughness_logits")


@dataclass
class Splats:
    """A batch of surfels; every field is a raw tensor with leading dim N."""

    means: Tensor
    quats: Tensor
    log_scales: Tensor
    opacity_logits: Tensor
    sh: Tensor
    albedo_logits: Tensor
    roughness_logits: Tensor

    def __len__(self) -> int:
        return self.means.shape[0]

    @property
    def sh_degree(self) -> int:
        return sh_degree_of(self.sh.shape[1])

    @property
    def dtype(self):
        return self.means.dtype

    def params(self) -> dict:
        return {k: getattr(self, k) for k in SPLAT_FIELDS}

    def scales(self) -> Tensor:
        return torch.exp(self.log_scales)

    def opacities(self) -> Tensor:
        return torch.sigmoid(self.opacity_logits)

    def albedo(self) -> Tensor:
        return torch.sigmoid(self.albedo_logits)

    def roughness(self) -> Tensor:
        return torch.sigmoid(self.roughness_logits)

    def map(self, fn) -> "Splats":
        return Splats(**{k: fn(v) for k, v in self.params().items()})

    def detach(self) -> "Splats":
        return self.map(lambda t: t.detach().clone())

    def to(self, dtype) -> "Splats":
        return self.map(lambda t: t.to(dtype))

    def requires_grad_(self, flag: bool = True) -> "Splats":
        for v in self.params().values():
            v.requires_grad_(flag)
        return self

    def select(self, idx) -> "Splats":
        return self.map(lambda t: t[idx])

    def with_sh_degree(self, degree: int) -> "Splats":
        """Truncate or zero-pad the SH coefficients to ``degree``."""
        if not 0 <= degree <= 3:
            raise ValueError("SH degree must be in 0..3")
        k = (degree + 1) ** 2
        sh = self.sh.detach()
        if sh.shape[1] >= k:
            sh = sh[:, :k].clone()
        else:
            sh = torch.cat([sh, sh.new_zeros(len(self), k - sh.shape[1], 3)], 1)
        out = self.detach()
        out.sh = sh
        return out

    def primitive(self, i: int) -> SplatPrimitive:
        g = lambda t: t[i].detach().cpu().numpy()  # noqa: E731
        return SplatPrimitive(
            g(self.means), g(self.quats), g(self.log_scales), float(g(self.opacity_logits)),
            g(self.sh), g(self.albedo_logits), float(g(self.roughness_logits)),
        )

    @classmethod
    def from_primitives(cls, prims: Sequence[SplatPrimitive], dtype=torch.float64) -> "Splats":
        t = lambda xs: torch.as_tensor(np.stack([np.asarray(x, dtype=np.float64) for x in xs]), dtype=dtype)  # noqa: E731
        return cls(
            t([p.center for p in prims]),
            t([p.quat for p in prims]),
            t([p.log_scale for p in prims]),
            t([p.opacity_logit for p in prims]),
            t([p.sh for p in prims]),
            t([p.albedo_logit for p in prims]),
            t([p.roughness_logit for p in prims]),
        )

    @classmethod
    def create(cls, means, quats, scales, opacities, albedo, roughness, sh=None, sh_degree: int = 2,
               dtype=torch.float64) -> "Splats":
        """Build from activated values (scales > 0, others in (0, 1))."""
        n = len(means)
        if sh is None:
            sh = np.zeros((n, (sh_degree + 1) ** 2, 3))
        f = lambda x: torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=dtype)  # noqa: E731
        return cls(
            f(means),
            f(quat_normalize(np.asarray(quats, dtype=np.float64))),
            f(np.log(np.broadcast_to(np.asarray(scales, dtype=np.float64), (n, 2)))),
            f(logit(np.broadcast_to(opacities, (n,)))),
            f(sh),
            f(logit(np.broadcast_to(albedo, (n, 3)))),
            f(logit(np.broadcast_to(roughness, (n,)))),
        )

    @classmethod
    def empty(cls, sh_degree: int = 2, dtype=torch.float64) -> "Splats":
        k = (sh_degree + 1) ** 2
        z = lambda *s: torch.zeros(*s, dtype=dtype)  # noqa: E731
        return cls(z(0, 3), z(0, 4), z(0, 2), z(0), z(0, k, 3), z(0, 3), z(0))


def identity_psf_logits(sharpness: float = 60.0, dtype=torch.float64) -> Tensor:
    """Raw PSF values whose softmax is the identity kernel (to rounding)."""
    k = torch.full((PSF_SIZE, PSF_SIZE), -float(sharpness), dtype=dtype)
    k[PSF_SIZE // 2, PSF_SIZE // 2] = 0.0
    return k


def psf_logits_from_kernel(kernel: np.ndarray, floor: float = 1e-12, dtype=torch.float64) -> Tensor:
    kernel = np.asarray(kernel, dtype=np.float64)
    kernel = kernel / kernel.sum()
    return torch.as_tensor(np.log(np.maximum(kernel, floor)), dtype=dtype)


@dataclass
class ProjectorDevice:
    """Pinhole projector with learnable response.

    ``gamma_raw`` and ``gain_raw`` are log-parameterized; ``psf_raw`` holds 25
    softmax logits. ``gain_raw`` has one entry (scalar gain) or three (per
    channel).
    """

    intrinsics: Pinhole
    pose: Pose
    gamma_raw: Tensor = field(default_factory=lambda: torch.tensor([math.log(2.2)], dtype=torch.float64))
    gain_raw: Tensor = field(default_factory=lambda: torch.tensor([0.0], dtype=torch.float64))
    psf_raw: Tensor = field(default_factory=identity_psf_logits)

    @classmethod
    def create(cls, intrinsics: Pinhole, pose: Pose, gamma: float = 2.2, gain=1.0, psf=None,
               psf_logits: Optional[Tensor] = None, dtype=torch.float64) -> "ProjectorDevice":
        if gamma <= 0 or np.any(np.asarray(gain) <= 0):
            raise ValueError("projector gamma and gain must be positive")
        gain = np.atleast_1d(np.asarray(gain, dtype=np.float64))
        if psf_logits is None:
            psf_logits = identity_psf_logits(dtype=dtype) if psf is None else psf_logits_from_kernel(psf, dtype=dtype)
        return cls(
            intrinsics, pose,
            torch.tensor([math.log(gamma)], dtype=dtype),
            torch.as_tensor(np.log(gain), dtype=dtype),
            psf_logits.to(dtype),
        )

    @property
    def gamma(self) -> Tensor:
        return torch.exp(self.gamma_raw)

    @property
    def gain(self) -> Tensor:
        return torch.exp(self.gain_raw)

    @property
    def psf(self) -> Tensor:
        return torch.softmax(self.psf_raw.reshape(-1), 0).reshape(PSF_SIZE, PSF_SIZE)

    def params(self) -> dict:
        return {"gamma_raw": self.gamma_raw, "gain_raw": self.gain_raw, "psf_raw": self.psf_raw}

    def detach(self) -> "ProjectorDevice":
        return ProjectorDevice(self.intrinsics, self.pose, self.gamma_raw.detach().clone(),
                               self.gain_raw.detach().clone(), self.psf_raw.detach().clone())

    def to(self, dtype) -> "ProjectorDevice":
        return ProjectorDevice(self.intrinsics, self.pose, self.gamma_raw.to(dtype), self.gain_raw.to(dtype),
                               self.psf_raw.to(dtype))

    def requires_grad_(self, flag: bool = True) -> "ProjectorDevice":
        for v in self.params().values():
            v.requires_grad_(flag)
        return self
