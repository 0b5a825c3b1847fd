"""Dense reference renderer: every pixel against every splat, no tiling.

Written directly in torch so autograd provides gradients independent of the
hand-written kernel backward. Intended for small scenes.
"""
from __future__ import annotations

import numpy as np
import torch

from ..core import CameraView, Splats
from . import N_FEAT, SUPPORT, BlendRecord, GBuffer, _assemble, _empty, prepare


def _sorted_distortion(W, z):
    zs = torch.where(W > 0, z, torch.zeros_like(z))
    order = torch.sort(zs.detach(), dim=-1, stable=True).indices
    w = torch.gather(W, -1, order)
    zz = torch.gather(zs, -1, order)
    A = torch.cumsum(w, -1) - w
    B = torch.cumsum(w * zz, -1) - w * zz
    return (w * (zz * A - B)).sum(-1)


def render_gbuffer_bruteforce(splats: Splats, view: CameraView, record: bool = False,
                              chunk: int = 2048) -> GBuffer:
    """Same contract as :func:`render_gbuffer`, without tiling or early exit."""
    prep = prepare(splats, view)
    N = prep.pc.shape[0]
    if N == 0:
        return _empty(splats, view)
    K = view.intrinsics
    H, Wd = K.height, K.width
    depth = prep.pc[:, 2].detach().numpy()
    order = torch.as_tensor(np.lexsort((np.arange(N), depth)))
    pc, a, b, n = prep.pc[order], prep.a[order], prep.b[order], prep.n[order]
    m2, opac, feat = prep.mean2d[order], prep.opac[order], prep.feat[order]
    rays = K.ray_grid(pc.dtype).reshape(-1, 3)
    ys, xs = torch.meshgrid(torch.arange(H, dtype=pc.dtype), torch.arange(Wd, dtype=pc.dtype), indexing="ij")
    pix = torch.stack([xs, ys], -1).reshape(-1, 2)
    num = (pc * n).sum(-1)
    outs, recs = [], []
    for s in range(0, H * Wd, chunk):
        d = rays[s:s + chunk]
        denom = d @ n.T
        ok = denom.abs() / d.norm(dim=-1, keepdim=True) >= 1e-9
        t = num / torch.where(ok, denom, torch.ones_like(denom))
        ok = ok & (t > 1e-6)
        t = torch.where(ok, t, torch.zeros_like(t))
        r = t[..., None] * d[:, None, :] - pc
        u = (r * a).sum(-1)
        v = (r * b).sum(-1)
        rho3 = torch.where(ok, 0.5 * (u * u + v * v), torch.full_like(u, 1e30))
        rho2 = ((pix[s:s + chunk, None, :] - m2) ** 2).sum(-1)
        three = rho3 <= rho2
        rho = torch.where(three, rho3, rho2)
        supp = rho <= SUPPORT
        alpha = torch.where(supp, opac * torch.exp(-torch.clamp(rho, max=SUPPORT)), torch.zeros_like(rho))
        z = torch.where(three, t, pc[:, 2].expand_as(t))
        T = torch.cumprod(torch.cat([torch.ones_like(alpha[:, :1]), 1 - alpha[:, :-1]], 1), 1)
        W = alpha * T
        outs.append((W @ feat, W.sum(-1), (W * z).sum(-1), _sorted_distortion(W, z)))
        if record:
            recs.append((alpha, W, z))
    feat_img = torch.cat([o[0] for o in outs]).reshape(H, Wd, N_FEAT)
    O = torch.cat([o[1] for o in outs]).reshape(H, Wd)
    Dn = torch.cat([o[2] for o in outs]).reshape(H, Wd)
    dist = torch.cat([o[3] for o in outs]).reshape(H, Wd)
    blend = None
    if record:
        alpha = torch.cat([r[0] for r in recs]).reshape(H, Wd, N)
        W = torch.cat([r[1] for r in recs]).reshape(H, Wd, N)
        z = torch.cat([r[2] for r in recs]).reshape(H, Wd, N)
        idx = prep.index[order].expand(H, Wd, N)
        idx = torch.where(W > 0, idx, torch.full_like(idx, -1))
        blend = BlendRecord(idx, alpha, W, z, n.expand(H, Wd, N, 3), omega_o=-pc.expand(H, Wd, N, 3))
    return _assemble(view, feat_img, O, Dn, dist, blend=blend)
