"""Gradients of the full pipeline and their finite-difference validation."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np
import torch
from torch import Tensor

from .core import CameraView, NumericalError, Pinhole, Pose, ProjectorDevice, Splats, sh_eval
from .losses import LossWeights, compute_terms, total
from .raster import prepare
from .shading import simulate

# parameter classes, named as in the model description
SPLAT_CLASSES = {"p": "means", "q": "quats", "s": "log_scales", "o": "opacity_logits", "c_g": "sh",
                 "b": "albedo_logits", "r": "roughness_logits"}
PROJECTOR_CLASSES = {"gamma_p": "gamma_raw", "G_p": "gain_raw", "kappa": "psf_raw"}


@dataclass
class ParamGradients:
    """Gradients with respect to the raw (pre-activation) parameters."""

    splats: Dict[str, Tensor]
    projector: Dict[str, Tensor] = field(default_factory=dict)

    def all(self) -> Dict[str, Tensor]:
        return {**self.splats, **self.projector}

    def is_finite(self) -> bool:
        return all(bool(torch.isfinite(g).all()) for g in self.all().values())

    def scaled(self, k: float) -> "ParamGradients":
        return ParamGradients({n: g * k for n, g in self.splats.items()},
                              {n: g * k for n, g in self.projector.items()})


def backward(loss: Tensor, splats: Splats, device: Optional[ProjectorDevice] = None,
             retain_graph: bool = False) -> ParamGradients:
    """Reverse-mode gradients of a scalar ``loss``; unused parameters get zeros."""
    if not bool(torch.isfinite(loss)):
        raise NumericalError("loss", f"value {float(loss.detach())}")
    named = dict(splats.params())
    if device is not None:
        named.update(device.params())
    names = [n for n, t in named.items() if t.requires_grad]
    if not names:
        raise ValueError("no parameter requires grad; call requires_grad_() before the forward pass")
    grads = torch.autograd.grad(loss, [named[n] for n in names], retain_graph=retain_graph, allow_unused=True)
    out = {n: (torch.zeros_like(named[n]) if g is None else g) for n, g in zip(names, grads)}
    for n, g in out.items():
        if not bool(torch.isfinite(g).all()):
            raise NumericalError(f"backward into {n}")
    proj_keys = set(PROJECTOR_CLASSES.values())
    return ParamGradients({n: g for n, g in out.items() if n not in proj_keys},
                          {n: g for n, g in out.items() if n in proj_keys})


# ---------------------------------------------------------------------------
# finite-difference check


@dataclass
class GradcheckScene:
    splats: Splats
    device: ProjectorDevice
    view: CameraView
    pattern: Tensor
    target: Tensor
    pixel_weights: Tensor
    mask: Tensor
    albedo_guide: Optional[Tensor] = None


def random_scene(seed: int, n_splats: int = 12, size: int = 32, sh_degree: int = 1) -> GradcheckScene:
    """A small, well-conditioned scene: surfels roughly facing the camera,
    lit by a nearby projector with a non-trivial PSF."""
    rng = np.random.default_rng(seed)
    n = n_splats
    means = np.column_stack([rng.uniform(-1.0, 1.0, n), rng.uniform(-1.0, 1.0, n), rng.uniform(3.0, 5.0, n)])
    axis = rng.normal(size=(n, 3))
    axis /= np.linalg.norm(axis, axis=1, keepdims=True)
    ang = rng.uniform(0, 0.6, n)
    quats = np.column_stack([np.cos(ang / 2), np.sin(ang / 2)[:, None] * axis])
    k = (sh_degree + 1) ** 2
    splats = Splats.create(
        means, quats, rng.uniform(0.15, 0.4, (n, 2)), rng.uniform(0.3, 0.75, n),
        rng.uniform(0.2, 0.8, (n, 3)), rng.uniform(0.3, 0.8, n),
        sh=rng.normal(0, 0.1, (n, k, 3)),
    )
    view = CameraView(Pinhole(30.0, 30.0, (size - 1) / 2, (size - 1) / 2, size, size), Pose.identity(), "cam")
    ps = 24
    proj_pose = Pose.look_at([0.6, -0.3, -0.2], [0.0, 0.0, 4.0], up=[0, -1, 0])
    device = ProjectorDevice.create(
        Pinhole(18.0, 18.0, (ps - 1) / 2, (ps - 1) / 2, ps, ps), proj_pose,
        gamma=rng.uniform(1.8, 2.4), gain=rng.uniform(1.5, 2.5),
        psf_logits=torch.as_tensor(rng.normal(0, 0.7, (5, 5))),
    )
    pattern = torch.as_tensor(rng.uniform(0.1, 0.9, (ps, ps, 3)))
    target = torch.as_tensor(rng.uniform(0.0, 1.0, (size, size, 3)))
    pw = torch.as_tensor(rng.normal(0, 1.0 / size, (size, size, 3)))
    mask = torch.as_tensor(rng.uniform(size=(size, size)) < 0.6)
    return GradcheckScene(splats, device, view, pattern, target, pw, mask)


def scene_loss(scene: GradcheckScene, splats: Splats, device: ProjectorDevice, weights: LossWeights = None):
    """Random linear image functional plus the full training objective.

    Returns ``(loss, state)`` where ``state`` captures every discrete
    decision taken in the forward pass. The material term's albedo guide is
    detached by design, so it is pinned to ``scene.albedo_guide`` to keep
    the objective a plain function of the parameters.
    """
    out, gb = simulate(splats, device, scene.view, scene.pattern)
    if scene.albedo_guide is None:
        scene.albedo_guide = gb.B.detach().clone()
    terms = compute_terms(out.image, scene.target, gb, weights, mask=scene.mask, albedo_guide=scene.albedo_guide)
    loss = (out.image * scene.pixel_weights).sum() + total(terms, weights)
    return loss, _discrete_state(scene, splats, device, gb, out)


def _discrete_state(scene, splats, device, gb, out):
    """Discrete decisions split into jumps (value discontinuities) and kinks
    (derivative discontinuities only)."""
    with torch.no_grad():
        jumps = [gb.signature, *(gb.tiles or ()), (gb.O > 1e-6).numpy()]
        # kinks: piecewise branches in shading, tone mapping and losses
        K = device.intrinsics
        x_s = gb.points_world()
        R, t = device.pose.torch(x_s.dtype)
        xp = x_s @ R.T + t
        zp = xp[..., 2]
        zs = torch.where(zp > 1e-6, zp, torch.ones_like(zp))
        u = K.fx * xp[..., 0] / zs + K.cx
        v = K.fy * xp[..., 1] / zs + K.cy
        N = gb.normals_world()
        to_p = torch.as_tensor(device.pose.center) - x_s
        to_c = torch.as_tensor(scene.view.pose.center) - x_s
        prep = prepare(splats, scene.view)
        R_c = torch.as_tensor(scene.view.pose.center)
        dirs = R_c - splats.means[prep.index]
        sh_raw = sh_eval(splats.sh[prep.index], dirs / dirs.norm(dim=-1, keepdim=True)) + 0.5
        kinks = [
            (zp > 1e-6).numpy(), torch.floor(u).numpy(), torch.floor(v).numpy(),
            ((to_p * N).sum(-1) > 0).numpy(), ((to_c * N).sum(-1) > 0).numpy(),
            (out.linear <= 0.0031308).numpy(), (out.C_p + out.C_g < 0).numpy(), (out.image >= 1).numpy(),
            (out.image > scene.target).numpy(), (gb.O >= 1e-8).numpy(), gb.normal_valid.numpy(),
            ((gb.O > 1 - 1e-6) | (gb.O < 1e-6)).numpy(), (sh_raw < 0).numpy(),
            (gb.R[:, 1:] == gb.R[:, :-1]).numpy(), (gb.R[1:] == gb.R[:-1]).numpy(),
        ]
    return jumps, kinks


def _same(a: List[np.ndarray], b: List[np.ndarray]) -> bool:
    return len(a) == len(b) and all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))


@dataclass
class ClassReport:
    name: str
    checked: int
    excluded: int
    max_rel_error: float
    worst: Optional[tuple] = None  # (element, analytic, numeric)

    def passed(self, tol: float) -> bool:
        return self.checked > 0 and self.max_rel_error <= tol


@dataclass
class GradcheckReport:
    classes: Dict[str, ClassReport]
    eps: float
    tol: float
    radius: float

    @property
    def passed(self) -> bool:
        return all(c.passed(self.tol) for c in self.classes.values())

    def lines(self) -> List[str]:
        out = []
        for c in self.classes.values():
            status = "ok" if c.passed(self.tol) else "FAIL"
            out.append(f"{c.name:8s} checked={c.checked:3d} excluded={c.excluded:3d} "
                       f"max_rel_err={c.max_rel_error:.3e} {status}")
        return out


def relative_error(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def gradcheck(scene: GradcheckScene, eps: float = 1e-5, tol: float = 1e-4, radius: float = 1e-3,
              per_class: int = 12, seed: int = 0,
              loss_fn: Optional[Callable] = None) -> GradcheckReport:
    """Compare autograd against central differences for every parameter class.

    An element is excluded (and counted) when moving it by ``radius`` in
    either direction changes a discontinuous decision of the forward pass
    (splat support, blending order, early termination, tile lists,
    coverage), or when the ``eps`` probe itself crosses a kink.
    """
    loss_fn = loss_fn or scene_loss
    splats = scene.splats.detach().requires_grad_()
    device = scene.device.detach().requires_grad_()
    loss, (jumps0, kinks0) = loss_fn(scene, splats, device)
    grads = backward(loss, splats, device).all()
    rng = np.random.default_rng(seed)
    raw = {**splats.detach().params(), **device.detach().params()}
    classes = {**SPLAT_CLASSES, **PROJECTOR_CLASSES}
    report: Dict[str, ClassReport] = {}

    def evaluate(name, flat_idx, delta):
        values = {k: v.clone() for k, v in raw.items()}
        values[name].view(-1)[flat_idx] += delta
        sp = Splats(**{k: values[k] for k in splats.params()})
        dv = ProjectorDevice(device.intrinsics, device.pose, values["gamma_raw"], values["gain_raw"],
                             values["psf_raw"])
        with torch.no_grad():
            val, state = loss_fn(scene, sp, dv)
        return float(val), state

    for label, name in classes.items():
        numel = raw[name].numel()
        picks = rng.permutation(numel)[: min(per_class, numel)]
        checked = excluded = 0
        worst, max_err = None, 0.0
        for idx in picks:
            idx = int(idx)
            jump_ok = all(_same(evaluate(name, idx, s * radius)[1][0], jumps0) for s in (1, -1))
            fp, (jp, kp) = evaluate(name, idx, eps)
            fm, (jm, km) = evaluate(name, idx, -eps)
            if not (jump_ok and _same(jp, jumps0) and _same(jm, jumps0) and _same(kp, kinks0)
                    and _same(km, kinks0)):
                excluded += 1
                continue
            numeric = (fp - fm) / (2 * eps)
            analytic = float(grads[name].reshape(-1)[idx])
            err = relative_error(analytic, numeric)
            checked += 1
            if err >= max_err:
                max_err, worst = err, (idx, analytic, numeric)
        report[label] = ClassReport(label, checked, excluded, max_err, worst)
    return GradcheckReport(report, eps, tol, radius)
