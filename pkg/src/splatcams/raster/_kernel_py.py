"""Pure numpy implementation of the blending kernels.

Same contract as the compiled module; each tile is evaluated as a dense
``[pixels, list entries]`` block. Used when the extension is unavailable or
``SPLATCAMS_PURE_PYTHON=1`` is set.
"""
import numpy as np

SUPPORT = 4.5
T_MIN = 1e-4
PARALLEL_EPS = 1e-9
HIT_EPS = 1e-6

G_M, G_PC, G_A, G_B, G_N, G_O, G_F = 0, 2, 5, 8, 11, 14, 15

_K1 = np.uint64(0x9E3779B97F4A7C15)
_K2 = np.uint64(0xC2B2AE3D27D4EB4F)


def _tile_pixels(tile, tiles_x, tile_size, width, height):
    x0 = (tile % tiles_x) * tile_size
    y0 = (tile // tiles_x) * tile_size
    ys, xs = np.meshgrid(np.arange(y0, min(y0 + tile_size, height)),
                         np.arange(x0, min(x0 + tile_size, width)), indexing="ij")
    return ys.ravel(), xs.ravel()


def _evaluate(px, py, fx, fy, cx, cy, ids, mean2d, pc, a, b, n, opac):
    dx = ((px - cx) / fx)[:, None]
    dy = ((py - cy) / fy)[:, None]
    dnorm = np.sqrt(dx * dx + dy * dy + 1.0)
    pcs, ns = pc[ids], n[ids]
    denom = dx * ns[:, 0] + dy * ns[:, 1] + ns[:, 2]
    num = (pcs * ns).sum(1)
    with np.errstate(divide="ignore", invalid="ignore"):
        ok = np.abs(denom) / dnorm >= PARALLEL_EPS
        t = np.where(ok, num / np.where(ok, denom, 1.0), 0.0)
    ok &= t > HIT_EPS
    t = np.where(ok, t, 0.0)
    rx = np.where(ok, t * dx - pcs[:, 0], 0.0)
    ry = np.where(ok, t * dy - pcs[:, 1], 0.0)
    rz = np.where(ok, t - pcs[:, 2], 0.0)
    aa, bb = a[ids], b[ids]
    u = rx * aa[:, 0] + ry * aa[:, 1] + rz * aa[:, 2]
    v = rx * bb[:, 0] + ry * bb[:, 1] + rz * bb[:, 2]
    rho3 = np.where(ok, 0.5 * (u * u + v * v), np.inf)
    ex = px[:, None] - mean2d[ids, 0]
    ey = py[:, None] - mean2d[ids, 1]
    rho2 = ex * ex + ey * ey
    three = rho3 <= rho2
    rho = np.where(three, rho3, rho2)
    branch = np.where(rho > SUPPORT, 0, np.where(three, 1, 2))
    G = np.where(branch > 0, np.exp(-np.minimum(rho, SUPPORT)), 0.0)
    alpha = opac[ids] * G
    z = np.where(three, t, pcs[:, 2])
    return dict(dx=dx, dy=dy, denom=np.where(ok, denom, 1.0), u=u, v=v, rx=rx, ry=ry, rz=rz,
                ex=ex, ey=ey, branch=branch, G=G, alpha=alpha, z=z)


def _transmittance(alpha, branch):
    T = np.cumprod(1.0 - alpha, axis=1)
    T = np.concatenate([np.ones((alpha.shape[0], 1)), T[:, :-1]], axis=1)
    included = (branch > 0) & (T >= T_MIN)
    return T, included


def _distortion(W, z):
    zs = np.where(W > 0, z, 0.0)
    order = np.argsort(zs, axis=1, kind="stable")
    w = np.take_along_axis(W, order, 1)
    zz = np.take_along_axis(zs, order, 1)
    A = np.cumsum(w, 1) - w
    B = np.cumsum(w * zz, 1) - w * zz
    S0 = w.sum(1, keepdims=True) - np.cumsum(w, 1)
    S1 = (w * zz).sum(1, keepdims=True) - np.cumsum(w * zz, 1)
    total = (w * (zz * A - B)).sum(1)
    dw_sorted = zz * A - B + S1 - zz * S0
    dz_sorted = w * A - w * S0
    dw = np.empty_like(dw_sorted)
    dz = np.empty_like(dz_sorted)
    np.put_along_axis(dw, order, dw_sorted, 1)
    np.put_along_axis(dz, order, dz_sorted, 1)
    return total, dw, dz


def forward(mean2d, pc, a, b, n, opac, feat, tile_offsets, tile_ids, width, height, fx, fy, cx, cy,
            tile_size, threads=1):
    F = feat.shape[1]
    tiles_x = (width + tile_size - 1) // tile_size
    out_feat = np.zeros((height, width, F))
    out_o = np.zeros((height, width))
    out_dn = np.zeros((height, width))
    out_dist = np.zeros((height, width))
    n_proc = np.zeros((height, width), dtype=np.int64)
    sig = np.zeros((height, width), dtype=np.uint64)
    for tile in range(len(tile_offsets) - 1):
        start, stop = tile_offsets[tile], tile_offsets[tile + 1]
        if stop == start:
            continue
        ids = tile_ids[start:stop]
        py, px = _tile_pixels(tile, tiles_x, tile_size, width, height)
        h = _evaluate(px.astype(float), py.astype(float), fx, fy, cx, cy, ids, mean2d, pc, a, b, n, opac)
        T, inc = _transmittance(h["alpha"], h["branch"])
        W = np.where(inc, h["alpha"] * T, 0.0)
        out_feat[py, px] = W @ feat[ids]
        out_o[py, px] = W.sum(1)
        out_dn[py, px] = (W * h["z"]).sum(1)
        out_dist[py, px] = _distortion(W, h["z"])[0]
        # entries processed: up to and including the one that dropped T below the cutoff
        T_after = T * (1.0 - np.where(inc, h["alpha"], 0.0))
        stopped = inc & (T_after < T_MIN)
        K = len(ids)
        last = np.where(stopped.any(1), stopped.argmax(1) + 1, K)
        n_proc[py, px] = last
        with np.errstate(over="ignore"):
            codes = (ids.astype(np.uint64)[None, :] * np.uint64(4) + h["branch"].astype(np.uint64)) * _K1
            pos = np.cumsum(inc, axis=1).astype(np.uint64) * _K2  # rank among included entries
            hsh = np.where(inc, codes ^ pos, np.uint64(0)).sum(1, dtype=np.uint64)
            sig[py, px] = hsh + stopped.any(1).astype(np.uint64)
    return out_feat, out_o, out_dn, out_dist, n_proc, sig.view(np.int64)


def backward(mean2d, pc, a, b, n, opac, feat, tile_offsets, tile_ids, n_proc, g_feat, g_o, g_dn, g_dist,
             width, height, fx, fy, cx, cy, tile_size, threads=1):
    N, F = feat.shape
    tiles_x = (width + tile_size - 1) // tile_size
    out = np.zeros((N, G_F + F))
    for tile in range(len(tile_offsets) - 1):
        start, stop = tile_offsets[tile], tile_offsets[tile + 1]
        if stop == start:
            continue
        ids = tile_ids[start:stop]
        py, px = _tile_pixels(tile, tiles_x, tile_size, width, height)
        pxf, pyf = px.astype(float), py.astype(float)
        h = _evaluate(pxf, pyf, fx, fy, cx, cy, ids, mean2d, pc, a, b, n, opac)
        alpha, branch = h["alpha"], h["branch"]
        T, inc = _transmittance(alpha, branch)
        W = np.where(inc, alpha * T, 0.0)
        _, dw, dz = _distortion(W, h["z"])
        gf = g_feat[py, px]
        go, gdn, gd = g_o[py, px][:, None], g_dn[py, px][:, None], g_dist[py, px][:, None]
        c = gf @ feat[ids].T + go + gdn * h["z"] + gd * dw
        gz = np.where(inc, gdn * W + gd * dz, 0.0)
        c = np.where(inc, c, 0.0)
        cw = c * W
        S = cw[:, ::-1].cumsum(1)[:, ::-1] - cw  # sum over later entries
        one_minus = 1.0 - alpha
        safe = np.where(one_minus > 1e-300, one_minus, 1.0)
        galpha = np.where(inc, T * c - np.where(one_minus > 1e-300, S / safe, 0.0), 0.0)
        rows = np.zeros((len(ids), G_F + F))
        rows[:, G_F:] = W.T @ gf
        rows[:, G_O] = (galpha * h["G"]).sum(0)
        grho = -alpha * galpha
        m3 = branch == 1
        gu = np.where(m3, grho * h["u"], 0.0)
        gv = np.where(m3, grho * h["v"], 0.0)
        r = (h["rx"], h["ry"], h["rz"])
        for j in range(3):
            rows[:, G_A + j] = (gu * r[j]).sum(0)
            rows[:, G_B + j] = (gv * r[j]).sum(0)
        aa, bb, nn = a[ids], b[ids], n[ids]
        gr = [gu * aa[:, j] + gv * bb[:, j] for j in range(3)]
        gt = np.where(m3, gr[0] * h["dx"] + gr[1] * h["dy"] + gr[2] + gz, 0.0)
        inv = gt / h["denom"]
        for j in range(3):
            rows[:, G_PC + j] = (-gr[j] + inv * nn[:, j]).sum(0)
            rows[:, G_N + j] = (-inv * r[j]).sum(0)
        m2 = branch == 2
        rows[:, G_M + 0] = np.where(m2, grho * (-2.0 * h["ex"]), 0.0).sum(0)
        rows[:, G_M + 1] = np.where(m2, grho * (-2.0 * h["ey"]), 0.0).sum(0)
        rows[:, G_PC + 2] += np.where(m2, gz, 0.0).sum(0)
        np.add.at(out, ids, rows)
    return out
