# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled implementations of the hot kernels.

Mirrors ``numpy_backend`` function-for-function. Sampler arithmetic runs in
float64 internally with the same accumulation order as the numpy fallback
(corner passes in fixed order, per-corner scratch buffers for scatters,
sequential channel sums), so the two backends are bit-identical; the build
disables fp contraction for the same reason.

Parallelism only splits loops whose iterations write disjoint outputs
(channels for im2col, points for gathers), so results are independent of
the thread count.
"""

import numpy as np

cimport cython
cimport numpy as cnp
from cython.parallel cimport prange
from libc.math cimport floor

cnp.import_array()

ctypedef fused floating:
    float
    double


# ---------------------------------------------------------------------------
# im2col / col2im
# ---------------------------------------------------------------------------

def unfold2d(floating[:, :, :, ::1] xp, int kh, int kw, int sh, int sw,
             int ho, int wo):
    cdef Py_ssize_t b = xp.shape[0], c = xp.shape[1]
    cdef Py_ssize_t ci, ky, kx, bi, y, x, k, col
    out_np = np.empty((c * kh * kw, b * ho * wo),
                      dtype=np.asarray(xp[:1, :1, :1, :1]).dtype)
    cdef floating[:, ::1] cols = out_np
    for ci in prange(c, nogil=True, schedule="static"):
        for ky in range(kh):
            for kx in range(kw):
                k = (ci * kh + ky) * kw + kx
                col = 0
                for bi in range(b):
                    for y in range(ho):
                        for x in range(wo):
                            cols[k, col] = xp[bi, ci, ky + sh * y, kx + sw * x]
                            col = col + 1
    return out_np


def fold2d(floating[:, ::1] cols, int b, int c, int hp, int wp,
           int kh, int kw, int sh, int sw, int ho, int wo):
    out_np = np.zeros((b, c, hp, wp), dtype=np.asarray(cols[:1, :1]).dtype)
    cdef floating[:, :, :, ::1] out = out_np
    cdef Py_ssize_t ci, ky, kx, bi, y, x, k, col
    for ci in prange(c, nogil=True, schedule="static"):
        for ky in range(kh):
            for kx in range(kw):
                k = (ci * kh + ky) * kw + kx
                col = 0
                for bi in range(b):
                    for y in range(ho):
                        for x in range(wo):
                            out[bi, ci, ky + sh * y, kx + sw * x] += \
                                cols[k, col]
                            col = col + 1
    return out_np


def unfold3d(floating[:, :, :, :, ::1] xp, int kd, int kh, int kw,
             int sd, int sh, int sw, int do, int ho, int wo):
    cdef Py_ssize_t b = xp.shape[0], c = xp.shape[1]
    cdef Py_ssize_t ci, kz, ky, kx, bi, z, y, x, k, col
    out_np = np.empty((c * kd * kh * kw, b * do * ho * wo),
                      dtype=np.asarray(xp[:1, :1, :1, :1, :1]).dtype)
    cdef floating[:, ::1] cols = out_np
    for ci in prange(c, nogil=True, schedule="static"):
        for kz in range(kd):
            for ky in range(kh):
                for kx in range(kw):
                    k = ((ci * kd + kz) * kh + ky) * kw + kx
                    col = 0
                    for bi in range(b):
                        for z in range(do):
                            for y in range(ho):
                                for x in range(wo):
                                    cols[k, col] = xp[bi, ci, kz + sd * z,
                                                      ky + sh * y,
                                                      kx + sw * x]
                                    col = col + 1
    return out_np


def fold3d(floating[:, ::1] cols, int b, int c, int dp, int hp, int wp,
           int kd, int kh, int kw, int sd, int sh, int sw,
           int do, int ho, int wo):
    out_np = np.zeros((b, c, dp, hp, wp), dtype=np.asarray(cols[:1, :1]).dtype)
    cdef floating[:, :, :, :, ::1] out = out_np
    cdef Py_ssize_t ci, kz, ky, kx, bi, z, y, x, k, col
    for ci in prange(c, nogil=True, schedule="static"):
        for kz in range(kd):
            for ky in range(kh):
                for kx in range(kw):
                    k = ((ci * kd + kz) * kh + ky) * kw + kx
                    col = 0
                    for bi in range(b):
                        for z in range(do):
                            for y in range(ho):
                                for x in range(wo):
                                    out[bi, ci, kz + sd * z, ky + sh * y,
                                        kx + sw * x] += cols[k, col]
                                    col = col + 1
    return out_np


def unfold3d_range(floating[:, :, :, :, ::1] xp, int kd, int kh, int kw,
                   int sd, int sh, int sw, int do, int ho, int wo,
                   Py_ssize_t lo, Py_ssize_t hi):
    """Columns [lo, hi) of unfold3d, for tiled convolution.

    lo and hi must be multiples of wo (scanline-aligned tiles) so the
    innermost x loop stays contiguous."""
    cdef Py_ssize_t b = xp.shape[0], c = xp.shape[1]
    cdef Py_ssize_t ci, kz, ky, kx, k, row, x, bi, z, y, base
    cdef Py_ssize_t row_lo = lo // wo, row_hi = hi // wo
    out_np = np.empty((c * kd * kh * kw, hi - lo),
                      dtype=np.asarray(xp[:1, :1, :1, :1, :1]).dtype)
    cdef floating[:, ::1] cols = out_np
    for ci in prange(c, nogil=True, schedule="static"):
        for kz in range(kd):
            for ky in range(kh):
                for kx in range(kw):
                    k = ((ci * kd + kz) * kh + ky) * kw + kx
                    for row in range(row_lo, row_hi):
                        y = row % ho
                        z = (row / ho) % do
                        bi = row / (ho * do)
                        base = (row - row_lo) * wo
                        for x in range(wo):
                            cols[k, base + x] = xp[bi, ci, kz + sd * z,
                                                   ky + sh * y, kx + sw * x]
    return out_np


def fold3d_add_range(floating[:, :, :, :, ::1] out, floating[:, ::1] cols,
                     int kd, int kh, int kw, int sd, int sh, int sw,
                     int do, int ho, int wo, Py_ssize_t lo, Py_ssize_t hi):
    """Scatter-add columns [lo, hi) into an existing padded buffer.

    lo and hi must be multiples of wo."""
    cdef Py_ssize_t b = out.shape[0], c = out.shape[1]
    cdef Py_ssize_t ci, kz, ky, kx, k, row, x, bi, z, y, base
    cdef Py_ssize_t row_lo = lo // wo, row_hi = hi // wo
    for ci in prange(c, nogil=True, schedule="static"):
        for kz in range(kd):
            for ky in range(kh):
                for kx in range(kw):
                    k = ((ci * kd + kz) * kh + ky) * kw + kx
                    for row in range(row_lo, row_hi):
                        y = row % ho
                        z = (row / ho) % do
                        bi = row / (ho * do)
                        base = (row - row_lo) * wo
                        for x in range(wo):
                            out[bi, ci, kz + sd * z, ky + sh * y,
                                kx + sw * x] += cols[k, base + x]


# ---------------------------------------------------------------------------
# bilinear sampling over (h, w)
# ---------------------------------------------------------------------------

def bilinear_gather(floating[:, :, :, ::1] vol, floating[:, :, ::1] xy):
    cdef Py_ssize_t s = vol.shape[0], c = vol.shape[1]
    cdef Py_ssize_t h = vol.shape[2], w = vol.shape[3]
    cdef Py_ssize_t p = xy.shape[1]
    dt = np.asarray(vol[:1, :1, :1, :1]).dtype
    out_np = np.zeros((s, p, c), dtype=dt)
    cov_np = np.zeros((s, p), dtype=np.uint8)
    cdef floating[:, :, ::1] out = out_np
    cdef unsigned char[:, ::1] cov = cov_np
    cdef Py_ssize_t si, pi, ci, corner
    cdef double x, y, fx, fy, wgt, acc
    cdef long x0, y0, xi, yi
    for si in range(s):
        for pi in prange(p, nogil=True, schedule="static"):
            x = <double>xy[si, pi, 0]
            y = <double>xy[si, pi, 1]
            x0 = <long>floor(x)
            y0 = <long>floor(y)
            fx = x - floor(x)
            fy = y - floor(y)
            if x >= 0 and x <= w - 1 and y >= 0 and y <= h - 1:
                cov[si, pi] = 1
            for ci in range(c):
                acc = 0
                for corner in range(4):
                    xi = x0 + (corner & 1)
                    yi = y0 + (corner >> 1)
                    if xi < 0 or xi >= w or yi < 0 or yi >= h:
                        continue
                    if corner == 0:
                        wgt = (1.0 - fy) * (1.0 - fx)
                    elif corner == 1:
                        wgt = (1.0 - fy) * fx
                    elif corner == 2:
                        wgt = fy * (1.0 - fx)
                    else:
                        wgt = fy * fx
                    acc = acc + (<double>vol[si, ci, yi, xi]) * wgt
                out[si, pi, ci] = <floating>acc
    return out_np, cov_np


def bilinear_scatter(floating[:, :, ::1] xy, floating[:, :, ::1] gout,
                     int c, int h, int w):
    cdef Py_ssize_t s = xy.shape[0], p = xy.shape[1]
    dt = np.asarray(gout[:1, :1, :1]).dtype
    acc_np = np.zeros((s, c, h, w), dtype=np.float64)
    scratch_np = np.zeros((c, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] acc = acc_np
    cdef double[:, :, ::1] scratch = scratch_np
    cdef Py_ssize_t si, pi, ci, corner
    cdef double x, y, fx, fy, wgt
    cdef long x0, y0, xi, yi
    for si in range(s):
        for corner in range(4):
            scratch_np[:] = 0.0
            with nogil:
                for pi in range(p):
                    x = <double>xy[si, pi, 0]
                    y = <double>xy[si, pi, 1]
                    x0 = <long>floor(x)
                    y0 = <long>floor(y)
                    fx = x - floor(x)
                    fy = y - floor(y)
                    xi = x0 + (corner & 1)
                    yi = y0 + (corner >> 1)
                    if xi < 0 or xi >= w or yi < 0 or yi >= h:
                        continue
                    if corner == 0:
                        wgt = (1.0 - fy) * (1.0 - fx)
                    elif corner == 1:
                        wgt = (1.0 - fy) * fx
                    elif corner == 2:
                        wgt = fy * (1.0 - fx)
                    else:
                        wgt = fy * fx
                    for ci in range(c):
                        scratch[ci, yi, xi] += \
                            (<double>gout[si, pi, ci]) * wgt
                for ci in range(c):
                    for yi in range(h):
                        for xi in range(w):
                            acc[si, ci, yi, xi] += scratch[ci, yi, xi]
    return acc_np.astype(dt)


def bilinear_coord_grad(floating[:, :, :, ::1] vol, floating[:, :, ::1] xy,
                        floating[:, :, ::1] gout):
    cdef Py_ssize_t s = vol.shape[0], c = vol.shape[1]
    cdef Py_ssize_t h = vol.shape[2], w = vol.shape[3]
    cdef Py_ssize_t p = xy.shape[1]
    dt = np.asarray(xy[:1, :1, :1]).dtype
    out_np = np.zeros((s, p, 2), dtype=dt)
    cdef floating[:, :, ::1] out = out_np
    cdef Py_ssize_t si, pi, ci
    cdef double x, y, fx, fy, g00, g01, g10, g11, gv
    cdef long x0, y0
    for si in range(s):
        for pi in prange(p, nogil=True, schedule="static"):
            x = <double>xy[si, pi, 0]
            y = <double>xy[si, pi, 1]
            x0 = <long>floor(x)
            y0 = <long>floor(y)
            fx = x - floor(x)
            fy = y - floor(y)
            g00 = 0; g01 = 0; g10 = 0; g11 = 0
            for ci in range(c):
                gv = <double>gout[si, pi, ci]
                if x0 >= 0 and x0 < w and y0 >= 0 and y0 < h:
                    g00 = g00 + gv * (<double>vol[si, ci, y0, x0])
                if x0 + 1 >= 0 and x0 + 1 < w and y0 >= 0 and y0 < h:
                    g01 = g01 + gv * (<double>vol[si, ci, y0, x0 + 1])
                if x0 >= 0 and x0 < w and y0 + 1 >= 0 and y0 + 1 < h:
                    g10 = g10 + gv * (<double>vol[si, ci, y0 + 1, x0])
                if (x0 + 1 >= 0 and x0 + 1 < w and y0 + 1 >= 0
                        and y0 + 1 < h):
                    g11 = g11 + gv * (<double>vol[si, ci, y0 + 1, x0 + 1])
            out[si, pi, 0] = <floating>((1.0 - fy) * (g01 - g00)
                                        + fy * (g11 - g10))
            out[si, pi, 1] = <floating>((1.0 - fx) * (g10 - g00)
                                        + fx * (g11 - g01))
    return out_np


# ---------------------------------------------------------------------------
# trilinear sampling over (d, h, w)
# ---------------------------------------------------------------------------

def trilinear_gather(floating[:, :, :, :, ::1] vol, floating[:, :, ::1] xyz):
    cdef Py_ssize_t s = vol.shape[0], c = vol.shape[1]
    cdef Py_ssize_t d = vol.shape[2], h = vol.shape[3], w = vol.shape[4]
    cdef Py_ssize_t p = xyz.shape[1]
    dt = np.asarray(vol[:1, :1, :1, :1, :1]).dtype
    out_np = np.zeros((s, p, c), dtype=dt)
    cov_np = np.zeros((s, p), dtype=np.uint8)
    cdef floating[:, :, ::1] out = out_np
    cdef unsigned char[:, ::1] cov = cov_np
    cdef Py_ssize_t si, pi, ci, corner
    cdef double x, y, z, fx, fy, fz, wgt, acc, wz, wy, wx
    cdef long x0, y0, z0, xi, yi, zi, dx, dy, dz
    for si in range(s):
        for pi in prange(p, nogil=True, schedule="static"):
            x = <double>xyz[si, pi, 0]
            y = <double>xyz[si, pi, 1]
            z = <double>xyz[si, pi, 2]
            x0 = <long>floor(x)
            y0 = <long>floor(y)
            z0 = <long>floor(z)
            fx = x - floor(x)
            fy = y - floor(y)
            fz = z - floor(z)
            if (x >= 0 and x <= w - 1 and y >= 0 and y <= h - 1
                    and z >= 0 and z <= d - 1):
                cov[si, pi] = 1
            for ci in range(c):
                acc = 0
                for corner in range(8):
                    dz = corner >> 2
                    dy = (corner >> 1) & 1
                    dx = corner & 1
                    xi = x0 + dx
                    yi = y0 + dy
                    zi = z0 + dz
                    if (xi < 0 or xi >= w or yi < 0 or yi >= h
                            or zi < 0 or zi >= d):
                        continue
                    wz = fz if dz else 1.0 - fz
                    wy = fy if dy else 1.0 - fy
                    wx = fx if dx else 1.0 - fx
                    wgt = wz * wy * wx
                    acc = acc + (<double>vol[si, ci, zi, yi, xi]) * wgt
                out[si, pi, ci] = <floating>acc
    return out_np, cov_np


def trilinear_scatter(floating[:, :, ::1] xyz, floating[:, :, ::1] gout,
                      int c, int d, int h, int w):
    cdef Py_ssize_t s = xyz.shape[0], p = xyz.shape[1]
    dt = np.asarray(gout[:1, :1, :1]).dtype
    acc_np = np.zeros((s, c, d, h, w), dtype=np.float64)
    scratch_np = np.zeros((c, d, h, w), dtype=np.float64)
    cdef double[:, :, :, :, ::1] acc = acc_np
    cdef double[:, :, :, ::1] scratch = scratch_np
    cdef Py_ssize_t si, pi, ci, corner
    cdef double x, y, z, fx, fy, fz, wgt, wz, wy, wx
    cdef long x0, y0, z0, xi, yi, zi, dx, dy, dz
    for si in range(s):
        for corner in range(8):
            dz = corner >> 2
            dy = (corner >> 1) & 1
            dx = corner & 1
            scratch_np[:] = 0.0
            with nogil:
                for pi in range(p):
                    x = <double>xyz[si, pi, 0]
                    y = <double>xyz[si, pi, 1]
                    z = <double>xyz[si, pi, 2]
                    x0 = <long>floor(x)
                    y0 = <long>floor(y)
                    z0 = <long>floor(z)
                    fx = x - floor(x)
                    fy = y - floor(y)
                    fz = z - floor(z)
                    xi = x0 + dx
                    yi = y0 + dy
                    zi = z0 + dz
                    if (xi < 0 or xi >= w or yi < 0 or yi >= h
                            or zi < 0 or zi >= d):
                        continue
                    wz = fz if dz else 1.0 - fz
                    wy = fy if dy else 1.0 - fy
                    wx = fx if dx else 1.0 - fx
                    wgt = wz * wy * wx
                    for ci in range(c):
                        scratch[ci, zi, yi, xi] += \
                            (<double>gout[si, pi, ci]) * wgt
                for ci in range(c):
                    for zi in range(d):
                        for yi in range(h):
                            for xi in range(w):
                                acc[si, ci, zi, yi, xi] += \
                                    scratch[ci, zi, yi, xi]
    return acc_np.astype(dt)


def trilinear_coord_grad(floating[:, :, :, :, ::1] vol,
                         floating[:, :, ::1] xyz, floating[:, :, ::1] gout):
    cdef Py_ssize_t s = vol.shape[0], c = vol.shape[1]
    cdef Py_ssize_t d = vol.shape[2], h = vol.shape[3], w = vol.shape[4]
    cdef Py_ssize_t p = xyz.shape[1]
    dt = np.asarray(xyz[:1, :1, :1]).dtype
    out_np = np.zeros((s, p, 3), dtype=dt)
    cdef floating[:, :, ::1] out = out_np
    cdef Py_ssize_t si, pi, ci, corner
    cdef double x, y, z, fx, fy, fz, gv
    cdef double g0, g1, g2, g3, g4, g5, g6, g7, vv
    cdef long x0, y0, z0, xi, yi, zi, dx, dy, dz
    for si in range(s):
        for pi in prange(p, nogil=True, schedule="static"):
            x = <double>xyz[si, pi, 0]
            y = <double>xyz[si, pi, 1]
            z = <double>xyz[si, pi, 2]
            x0 = <long>floor(x)
            y0 = <long>floor(y)
            z0 = <long>floor(z)
            fx = x - floor(x)
            fy = y - floor(y)
            fz = z - floor(z)
            g0 = 0; g1 = 0; g2 = 0; g3 = 0; g4 = 0; g5 = 0; g6 = 0; g7 = 0
            for ci in range(c):
                gv = <double>gout[si, pi, ci]
                for corner in range(8):
                    dz = corner >> 2
                    dy = (corner >> 1) & 1
                    dx = corner & 1
                    xi = x0 + dx
                    yi = y0 + dy
                    zi = z0 + dz
                    if (xi < 0 or xi >= w or yi < 0 or yi >= h
                            or zi < 0 or zi >= d):
                        continue
                    vv = gv * (<double>vol[si, ci, zi, yi, xi])
                    if corner == 0:
                        g0 = g0 + vv
                    elif corner == 1:
                        g1 = g1 + vv
                    elif corner == 2:
                        g2 = g2 + vv
                    elif corner == 3:
                        g3 = g3 + vv
                    elif corner == 4:
                        g4 = g4 + vv
                    elif corner == 5:
                        g5 = g5 + vv
                    elif corner == 6:
                        g6 = g6 + vv
                    else:
                        g7 = g7 + vv
            # corner index: bit0 = dx, bit1 = dy, bit2 = dz
            out[si, pi, 0] = <floating>(
                (1.0 - fz) * ((1.0 - fy) * (g1 - g0) + fy * (g3 - g2))
                + fz * ((1.0 - fy) * (g5 - g4) + fy * (g7 - g6)))
            out[si, pi, 1] = <floating>(
                (1.0 - fz) * ((1.0 - fx) * (g2 - g0) + fx * (g3 - g1))
                + fz * ((1.0 - fx) * (g6 - g4) + fx * (g7 - g5)))
            out[si, pi, 2] = <floating>(
                (1.0 - fy) * ((1.0 - fx) * (g4 - g0) + fx * (g5 - g1))
                + fy * ((1.0 - fx) * (g6 - g2) + fx * (g7 - g3)))
    return out_np


# ---------------------------------------------------------------------------
# frustum sampling (per-pixel depth ladders)
# ---------------------------------------------------------------------------

cdef inline double _corner_weight(int corner, double fu, double fv) nogil:
    if corner == 0:
        return (1.0 - fv) * (1.0 - fu)
    elif corner == 1:
        return (1.0 - fv) * fu
    elif corner == 2:
        return fv * (1.0 - fu)
    return fv * fu


def frustum_gather(floating[:, :, :, :, ::1] vol, floating[:, :, ::1] uvz,
                   floating[:, :, ::1] start, floating[::1] step):
    cdef Py_ssize_t s = vol.shape[0], c = vol.shape[1]
    cdef Py_ssize_t d = vol.shape[2], h = vol.shape[3], w = vol.shape[4]
    cdef Py_ssize_t p = uvz.shape[1]
    dt = np.asarray(vol[:1, :1, :1, :1, :1]).dtype
    out_np = np.zeros((s, p, c), dtype=dt)
    cov_np = np.zeros((s, p), dtype=dt)
    cdef floating[:, :, ::1] out = out_np
    cdef floating[:, ::1] cov = cov_np
    cdef Py_ssize_t si, pi, ci, corner
    cdef double u, v, z, fu, fv, wgt, idx, fk, covacc, stp, acc
    cdef long u0, v0, ui, vi, k0
    cdef bint inside
    for si in range(s):
        stp = <double>step[si]
        for pi in prange(p, nogil=True, schedule="static"):
            u = <double>uvz[si, pi, 0]
            v = <double>uvz[si, pi, 1]
            z = <double>uvz[si, pi, 2]
            inside = (u >= 0 and u <= w - 1 and v >= 0 and v <= h - 1
                      and z > 0)
            u0 = <long>floor(u)
            v0 = <long>floor(v)
            fu = u - floor(u)
            fv = v - floor(v)
            if u0 < 0:
                u0 = 0
            if u0 > w - 1:
                u0 = w - 1
            if v0 < 0:
                v0 = 0
            if v0 > h - 1:
                v0 = h - 1
            covacc = 0
            for corner in range(4):
                ui = u0 + (corner & 1)
                vi = v0 + (corner >> 1)
                if ui > w - 1:
                    ui = w - 1
                if vi > h - 1:
                    vi = h - 1
                idx = (z - <double>start[si, vi, ui]) / stp
                if (not inside) or idx < 0 or idx > d - 1:
                    continue
                covacc = covacc + _corner_weight(corner, fu, fv)
            cov[si, pi] = <floating>covacc
            for ci in range(c):
                acc = 0
                for corner in range(4):
                    ui = u0 + (corner & 1)
                    vi = v0 + (corner >> 1)
                    if ui > w - 1:
                        ui = w - 1
                    if vi > h - 1:
                        vi = h - 1
                    idx = (z - <double>start[si, vi, ui]) / stp
                    if (not inside) or idx < 0 or idx > d - 1:
                        continue
                    k0 = <long>floor(idx)
                    if k0 > d - 2:
                        k0 = d - 2
                    if k0 < 0:
                        k0 = 0
                    fk = idx - k0
                    wgt = _corner_weight(corner, fu, fv)
                    acc = acc + ((1.0 - fk)
                                 * (<double>vol[si, ci, k0, vi, ui])
                                 + fk * (<double>vol[si, ci, k0 + 1, vi, ui])
                                 ) * wgt
                out[si, pi, ci] = <floating>acc
    return out_np, cov_np


def frustum_scatter(floating[:, :, ::1] uvz, floating[:, :, ::1] start,
                    floating[::1] step, floating[:, :, ::1] gout,
                    int c, int d, int h, int w):
    cdef Py_ssize_t s = uvz.shape[0], p = uvz.shape[1]
    dt = np.asarray(gout[:1, :1, :1]).dtype
    acc_np = np.zeros((s, c, d, h, w), dtype=np.float64)
    scratch_np = np.zeros((c, d, h, w), dtype=np.float64)
    cdef double[:, :, :, :, ::1] acc = acc_np
    cdef double[:, :, :, ::1] scratch = scratch_np
    cdef Py_ssize_t si, pi, ci, corner, phase
    cdef double u, v, z, fu, fv, idx, fk, stp, wgt, wv
    cdef long u0, v0, ui, vi, k0, kk
    cdef bint inside
    for si in range(s):
        stp = <double>step[si]
        for corner in range(4):
            # phase 0 scatters the low lattice reads, phase 1 the high
            # ones, matching the two bincount passes of the numpy backend.
            for phase in range(2):
                scratch_np[:] = 0.0
                with nogil:
                    for pi in range(p):
                        u = <double>uvz[si, pi, 0]
                        v = <double>uvz[si, pi, 1]
                        z = <double>uvz[si, pi, 2]
                        inside = (u >= 0 and u <= w - 1 and v >= 0
                                  and v <= h - 1 and z > 0)
                        u0 = <long>floor(u)
                        v0 = <long>floor(v)
                        fu = u - floor(u)
                        fv = v - floor(v)
                        if u0 < 0:
                            u0 = 0
                        if u0 > w - 1:
                            u0 = w - 1
                        if v0 < 0:
                            v0 = 0
                        if v0 > h - 1:
                            v0 = h - 1
                        ui = u0 + (corner & 1)
                        vi = v0 + (corner >> 1)
                        if ui > w - 1:
                            ui = w - 1
                        if vi > h - 1:
                            vi = h - 1
                        idx = (z - <double>start[si, vi, ui]) / stp
                        if (not inside) or idx < 0 or idx > d - 1:
                            continue
                        k0 = <long>floor(idx)
                        if k0 > d - 2:
                            k0 = d - 2
                        if k0 < 0:
                            k0 = 0
                        fk = idx - k0
                        wv = _corner_weight(corner, fu, fv)
                        if phase == 0:
                            wgt = wv * (1.0 - fk)
                            kk = k0
                        else:
                            wgt = wv * fk
                            kk = k0 + 1
                        for ci in range(c):
                            scratch[ci, kk, vi, ui] += \
                                (<double>gout[si, pi, ci]) * wgt
                    for ci in range(c):
                        for kk in range(d):
                            for vi in range(h):
                                for ui in range(w):
                                    acc[si, ci, kk, vi, ui] += \
                                        scratch[ci, kk, vi, ui]
    return acc_np.astype(dt)


def frustum_coord_grad(floating[:, :, :, :, ::1] vol,
                       floating[:, :, ::1] uvz, floating[:, :, ::1] start,
                       floating[::1] step, floating[:, :, ::1] gout):
    cdef Py_ssize_t s = vol.shape[0], c = vol.shape[1]
    cdef Py_ssize_t d = vol.shape[2], h = vol.shape[3], w = vol.shape[4]
    cdef Py_ssize_t p = uvz.shape[1]
    dt = np.asarray(uvz[:1, :1, :1]).dtype
    out_np = np.zeros((s, p, 3), dtype=dt)
    cdef floating[:, :, ::1] out = out_np
    cdef Py_ssize_t si, pi, ci, corner
    cdef double u, v, z, fu, fv, idx, fk, stp, gv, lo, hi, vacc, sacc
    cdef double cv0, cv1, cv2, cv3, cs0, cs1, cs2, cs3
    cdef long u0, v0, ui, vi, k0
    cdef bint inside
    for si in range(s):
        stp = <double>step[si]
        for pi in prange(p, nogil=True, schedule="static"):
            u = <double>uvz[si, pi, 0]
            v = <double>uvz[si, pi, 1]
            z = <double>uvz[si, pi, 2]
            inside = (u >= 0 and u <= w - 1 and v >= 0 and v <= h - 1
                      and z > 0)
            u0 = <long>floor(u)
            v0 = <long>floor(v)
            fu = u - floor(u)
            fv = v - floor(v)
            if u0 < 0:
                u0 = 0
            if u0 > w - 1:
                u0 = w - 1
            if v0 < 0:
                v0 = 0
            if v0 > h - 1:
                v0 = h - 1
            cv0 = 0; cv1 = 0; cv2 = 0; cv3 = 0
            cs0 = 0; cs1 = 0; cs2 = 0; cs3 = 0
            for corner in range(4):
                ui = u0 + (corner & 1)
                vi = v0 + (corner >> 1)
                if ui > w - 1:
                    ui = w - 1
                if vi > h - 1:
                    vi = h - 1
                idx = (z - <double>start[si, vi, ui]) / stp
                if (not inside) or idx < 0 or idx > d - 1:
                    continue
                k0 = <long>floor(idx)
                if k0 > d - 2:
                    k0 = d - 2
                if k0 < 0:
                    k0 = 0
                fk = idx - k0
                vacc = 0
                sacc = 0
                for ci in range(c):
                    gv = <double>gout[si, pi, ci]
                    lo = <double>vol[si, ci, k0, vi, ui]
                    hi = <double>vol[si, ci, k0 + 1, vi, ui]
                    vacc = vacc + gv * ((1.0 - fk) * lo + fk * hi)
                    sacc = sacc + gv * (hi - lo)
                if corner == 0:
                    cv0 = vacc
                    cs0 = sacc / stp
                elif corner == 1:
                    cv1 = vacc
                    cs1 = sacc / stp
                elif corner == 2:
                    cv2 = vacc
                    cs2 = sacc / stp
                else:
                    cv3 = vacc
                    cs3 = sacc / stp
            out[si, pi, 0] = <floating>(
                (1.0 - fv) * (cv1 - cv0) + fv * (cv3 - cv2))
            out[si, pi, 1] = <floating>(
                (1.0 - fu) * (cv2 - cv0) + fu * (cv3 - cv1))
            out[si, pi, 2] = <floating>(
                (1.0 - fv) * (1.0 - fu) * cs0
                + (1.0 - fv) * fu * cs1
                + fv * (1.0 - fu) * cs2
                + fv * fu * cs3)
    return out_np
