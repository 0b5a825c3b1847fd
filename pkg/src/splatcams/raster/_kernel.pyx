# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled per-pixel blending kernels (forward and backward).

Inputs are the per-splat camera-space quantities produced by
``splatcams.raster.prepare``; outputs are per-pixel sums over the blend
order. Tiles are independent, so the tile loop runs under OpenMP. Every
gradient contribution is written to a slot owned by one (tile, list entry)
pair and reduced afterwards in list order, which keeps results independent
of the thread count.
"""
import numpy as np
cimport numpy as cnp
from cython.parallel cimport prange
from libc.math cimport exp, sqrt, fabs, INFINITY
from libc.stdlib cimport malloc, free
from libc.stdint cimport uint64_t, int64_t

cnp.import_array()

cdef double SUPPORT = 4.5
cdef double T_MIN = 1e-4
cdef double PARALLEL_EPS = 1e-9
cdef double HIT_EPS = 1e-6
cdef uint64_t SIG_K1 = 0x9E3779B97F4A7C15ULL
cdef uint64_t SIG_K2 = 0xC2B2AE3D27D4EB4FULL

# layout of one per-entry gradient row
cdef enum:
    G_M = 0
    G_PC = 2
    G_A = 5
    G_B = 8
    G_N = 11
    G_O = 14
    G_F = 15


cdef struct Hit:
    int entry
    int branch
    double alpha
    double G
    double z
    double u
    double v
    double t
    double denom
    double rx
    double ry
    double rz
    double T


cdef inline int evaluate(double px, double py, double dx, double dy, double dnorm,
                         const double* m2, const double* pc, const double* a, const double* b,
                         const double* n, double o, Hit* h) noexcept nogil:
    cdef double denom = dx * n[0] + dy * n[1] + n[2]
    cdef double rho3 = INFINITY
    cdef double t = 0.0, rx = 0.0, ry = 0.0, rz = 0.0, u = 0.0, v = 0.0
    if fabs(denom) / dnorm >= PARALLEL_EPS:
        t = (pc[0] * n[0] + pc[1] * n[1] + pc[2] * n[2]) / denom
        if t > HIT_EPS:
            rx = t * dx - pc[0]
            ry = t * dy - pc[1]
            rz = t - pc[2]
            u = rx * a[0] + ry * a[1] + rz * a[2]
            v = rx * b[0] + ry * b[1] + rz * b[2]
            rho3 = 0.5 * (u * u + v * v)
    cdef double ex = px - m2[0]
    cdef double ey = py - m2[1]
    cdef double rho2 = ex * ex + ey * ey
    cdef double rho
    if rho3 <= rho2:
        rho = rho3
        h.branch = 1
        h.z = t
    else:
        rho = rho2
        h.branch = 2
        h.z = pc[2]
    if rho > SUPPORT:
        h.branch = 0
        return 0
    h.G = exp(-rho)
    h.alpha = o * h.G
    h.u = u
    h.v = v
    h.t = t
    h.denom = denom
    h.rx = rx
    h.ry = ry
    h.rz = rz
    return 1


cdef inline double sorted_distortion(int k, const double* w, const double* z, int* order,
                                     double* dw, double* dz) noexcept nogil:
    """Sum over unordered pairs of w_i w_j |z_i - z_j| in O(k) after sorting.

    When ``dw``/``dz`` are non-null the partial derivatives are written too.
    """
    cdef int i, j, key
    for i in range(k):
        order[i] = i
    # insertion sort: lists are short and mostly sorted already
    for i in range(1, k):
        key = order[i]
        j = i - 1
        while j >= 0 and z[order[j]] > z[key]:
            order[j + 1] = order[j]
            j -= 1
        order[j + 1] = key
    cdef double A = 0.0, B = 0.0, total = 0.0, wi, zi
    cdef double S0 = 0.0, S1 = 0.0
    for i in range(k):
        j = order[i]
        total += w[j] * (z[j] * A - B)
        if dw != NULL:
            dw[j] = z[j] * A - B
            dz[j] = w[j] * A
        A += w[j]
        B += w[j] * z[j]
    if dw != NULL:
        for i in range(k - 1, -1, -1):
            j = order[i]
            dw[j] += S1 - z[j] * S0
            dz[j] -= w[j] * S0
            S0 += w[j]
            S1 += w[j] * z[j]
    return total


def forward(double[:, ::1] mean2d, double[:, ::1] pc, double[:, ::1] a, double[:, ::1] b,
            double[:, ::1] n, double[::1] opac, double[:, ::1] feat,
            int64_t[::1] tile_offsets, int64_t[::1] tile_ids,
            int width, int height, double fx, double fy, double cx, double cy,
            int tile_size, int threads=1):
    cdef int F = feat.shape[1]
    cdef int tiles_x = (width + tile_size - 1) // tile_size
    cdef int n_tiles = tile_offsets.shape[0] - 1
    out_feat_np = np.zeros((height, width, F), dtype=np.float64)
    out_o_np = np.zeros((height, width), dtype=np.float64)
    out_dn_np = np.zeros((height, width), dtype=np.float64)
    out_dist_np = np.zeros((height, width), dtype=np.float64)
    n_proc_np = np.zeros((height, width), dtype=np.int64)
    sig_np = np.zeros((height, width), dtype=np.uint64)
    cdef double[:, :, ::1] out_feat = out_feat_np
    cdef double[:, ::1] out_o = out_o_np
    cdef double[:, ::1] out_dn = out_dn_np
    cdef double[:, ::1] out_dist = out_dist_np
    cdef int64_t[:, ::1] n_proc = n_proc_np
    cdef uint64_t[:, ::1] sig = sig_np

    cdef int tile, x0, y0, x, y, e, start, stop, g, k, c, count, maxlen
    cdef double px, py, dx, dy, dnorm, T, W
    cdef uint64_t hsh
    cdef Hit* h  # per tile: a plain struct local would be shared between threads
    cdef double* wbuf
    cdef double* zbuf
    cdef int* obuf

    maxlen = 1
    for tile in range(n_tiles):
        if tile_offsets[tile + 1] - tile_offsets[tile] > maxlen:
            maxlen = <int>(tile_offsets[tile + 1] - tile_offsets[tile])

    for tile in prange(n_tiles, nogil=True, num_threads=threads, schedule="dynamic"):
        start = <int>tile_offsets[tile]
        stop = <int>tile_offsets[tile + 1]
        if stop == start:
            continue
        h = <Hit*>malloc(sizeof(Hit))
        wbuf = <double*>malloc(maxlen * sizeof(double))
        zbuf = <double*>malloc(maxlen * sizeof(double))
        obuf = <int*>malloc(maxlen * sizeof(int))
        x0 = (tile % tiles_x) * tile_size
        y0 = (tile // tiles_x) * tile_size
        for y in range(y0, min(y0 + tile_size, height)):
            for x in range(x0, min(x0 + tile_size, width)):
                px = x
                py = y
                dx = (px - cx) / fx
                dy = (py - cy) / fy
                dnorm = sqrt(dx * dx + dy * dy + 1.0)
                T = 1.0
                count = 0
                hsh = 0
                e = start
                while e < stop:
                    g = <int>tile_ids[e]
                    if evaluate(px, py, dx, dy, dnorm, &mean2d[g, 0], &pc[g, 0], &a[g, 0], &b[g, 0],
                                &n[g, 0], opac[g], h):
                        W = h.alpha * T
                        for c in range(F):
                            out_feat[y, x, c] += W * feat[g, c]
                        out_o[y, x] += W
                        out_dn[y, x] += W * h.z
                        wbuf[count] = W
                        zbuf[count] = h.z
                        count = count + 1
                        # same hash as the numpy kernel: sum of (code*K1) ^ (rank*K2)
                        hsh = hsh + ((<uint64_t>(g * 4 + h.branch) * SIG_K1) ^ (<uint64_t>count * SIG_K2))
                        T = T * (1.0 - h.alpha)
                        if T < T_MIN:
                            hsh = hsh + 1
                            e = e + 1
                            break
                    e = e + 1
                n_proc[y, x] = e - start
                sig[y, x] = hsh
                if count > 1:
                    out_dist[y, x] = sorted_distortion(count, wbuf, zbuf, obuf, NULL, NULL)
        free(h)
        free(wbuf)
        free(zbuf)
        free(obuf)
    return out_feat_np, out_o_np, out_dn_np, out_dist_np, n_proc_np, sig_np.view(np.int64)


def backward(double[:, ::1] mean2d, double[:, ::1] pc, double[:, ::1] a, double[:, ::1] b,
             double[:, ::1] n, double[::1] opac, double[:, ::1] feat,
             int64_t[::1] tile_offsets, int64_t[::1] tile_ids, int64_t[:, ::1] n_proc,
             double[:, :, ::1] g_feat, double[:, ::1] g_o, double[:, ::1] g_dn, double[:, ::1] g_dist,
             int width, int height, double fx, double fy, double cx, double cy,
             int tile_size, int threads=1):
    """Gradients w.r.t. every per-splat input, reduced in list order."""
    cdef int N = mean2d.shape[0]
    cdef int F = feat.shape[1]
    cdef int R = G_F + F
    cdef int M = tile_ids.shape[0]
    cdef int tiles_x = (width + tile_size - 1) // tile_size
    cdef int n_tiles = tile_offsets.shape[0] - 1
    rows_np = np.zeros((M, R), dtype=np.float64)
    cdef double[:, ::1] rows = rows_np

    cdef int tile, x0, y0, x, y, e, start, stop, g, k, c, count, maxlen, i
    cdef double px, py, dx, dy, dnorm, T, W, U, ck, gz, galpha, grho, gu, gv
    cdef double grx, gry, grz, gt, inv_den, gfdot
    cdef Hit* hits
    cdef double* wbuf
    cdef double* zbuf
    cdef double* dwbuf
    cdef double* dzbuf
    cdef int* obuf
    cdef double* row

    maxlen = 1
    for tile in range(n_tiles):
        if tile_offsets[tile + 1] - tile_offsets[tile] > maxlen:
            maxlen = <int>(tile_offsets[tile + 1] - tile_offsets[tile])

    for tile in prange(n_tiles, nogil=True, num_threads=threads, schedule="dynamic"):
        start = <int>tile_offsets[tile]
        stop = <int>tile_offsets[tile + 1]
        if stop == start:
            continue
        hits = <Hit*>malloc(maxlen * sizeof(Hit))
        wbuf = <double*>malloc(maxlen * sizeof(double))
        zbuf = <double*>malloc(maxlen * sizeof(double))
        dwbuf = <double*>malloc(maxlen * sizeof(double))
        dzbuf = <double*>malloc(maxlen * sizeof(double))
        obuf = <int*>malloc(maxlen * sizeof(int))
        x0 = (tile % tiles_x) * tile_size
        y0 = (tile // tiles_x) * tile_size
        for y in range(y0, min(y0 + tile_size, height)):
            for x in range(x0, min(x0 + tile_size, width)):
                px = x
                py = y
                dx = (px - cx) / fx
                dy = (py - cy) / fy
                dnorm = sqrt(dx * dx + dy * dy + 1.0)
                T = 1.0
                count = 0
                for e in range(start, start + <int>n_proc[y, x]):
                    g = <int>tile_ids[e]
                    if evaluate(px, py, dx, dy, dnorm, &mean2d[g, 0], &pc[g, 0], &a[g, 0], &b[g, 0],
                                &n[g, 0], opac[g], &hits[count]):
                        hits[count].entry = e
                        hits[count].T = T
                        wbuf[count] = hits[count].alpha * T
                        zbuf[count] = hits[count].z
                        T = T * (1.0 - hits[count].alpha)
                        count = count + 1
                if count == 0:
                    continue
                if count > 1 and g_dist[y, x] != 0.0:
                    sorted_distortion(count, wbuf, zbuf, obuf, dwbuf, dzbuf)
                else:
                    for k in range(count):
                        dwbuf[k] = 0.0
                        dzbuf[k] = 0.0
                U = 0.0
                for k in range(count - 1, -1, -1):
                    e = hits[k].entry
                    g = <int>tile_ids[e]
                    row = &rows[e, 0]
                    W = wbuf[k]
                    gfdot = 0.0
                    for c in range(F):
                        gfdot = gfdot + g_feat[y, x, c] * feat[g, c]
                        row[G_F + c] += W * g_feat[y, x, c]
                    ck = gfdot + g_o[y, x] + g_dn[y, x] * hits[k].z + g_dist[y, x] * dwbuf[k]
                    gz = g_dn[y, x] * W + g_dist[y, x] * dzbuf[k]
                    galpha = hits[k].T * (ck - U)
                    U = ck * hits[k].alpha + (1.0 - hits[k].alpha) * U
                    row[G_O] += galpha * hits[k].G
                    grho = -hits[k].alpha * galpha
                    if hits[k].branch == 1:
                        gu = grho * hits[k].u
                        gv = grho * hits[k].v
                        row[G_A + 0] += gu * hits[k].rx
                        row[G_A + 1] += gu * hits[k].ry
                        row[G_A + 2] += gu * hits[k].rz
                        row[G_B + 0] += gv * hits[k].rx
                        row[G_B + 1] += gv * hits[k].ry
                        row[G_B + 2] += gv * hits[k].rz
                        grx = gu * a[g, 0] + gv * b[g, 0]
                        gry = gu * a[g, 1] + gv * b[g, 1]
                        grz = gu * a[g, 2] + gv * b[g, 2]
                        gt = grx * dx + gry * dy + grz + gz
                        inv_den = 1.0 / hits[k].denom
                        row[G_PC + 0] += -grx + gt * n[g, 0] * inv_den
                        row[G_PC + 1] += -gry + gt * n[g, 1] * inv_den
                        row[G_PC + 2] += -grz + gt * n[g, 2] * inv_den
                        row[G_N + 0] += -gt * hits[k].rx * inv_den
                        row[G_N + 1] += -gt * hits[k].ry * inv_den
                        row[G_N + 2] += -gt * hits[k].rz * inv_den
                    else:
                        row[G_M + 0] += grho * (-2.0 * (px - mean2d[g, 0]))
                        row[G_M + 1] += grho * (-2.0 * (py - mean2d[g, 1]))
                        row[G_PC + 2] += gz
        free(hits)
        free(wbuf)
        free(zbuf)
        free(dwbuf)
        free(dzbuf)
        free(obuf)

    out_np = np.zeros((N, R), dtype=np.float64)
    cdef double[:, ::1] out = out_np
    for e in range(M):
        g = <int>tile_ids[e]
        for c in range(R):
            out[g, c] += rows[e, c]
    return out_np
