# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled rasterizer kernels, parallelized with OpenMP.

Tile compositing runs over tiles, splat projection over Gaussians; both are
documented in ``_kernels_py`` and the two backends are written
expression-for-expression identically. In double precision the compiled
compositor calls libm ``exp``, which matches ``math.exp`` bit for bit, and
the projection kernels use only IEEE-exact operations (the one projection
``exp`` stays outside, shared by both backends), so 64-bit output is
identical across backends. No loop iteration writes another iteration's
rows or pixels, so results do not depend on the thread count or schedule.
"""

import numpy as np

cimport numpy as cnp
from cython.parallel cimport prange
from libc.math cimport ceil, exp, expf, isfinite, sqrt

cnp.import_array()

BACKEND = "cython"

ctypedef fused real:
    float
    double


cdef inline real _exp(real x) noexcept nogil:
    if real is float:
        return expf(x)
    else:
        return exp(x)


def composite_forward(real[:, ::1] means2d, real[:, ::1] conics,
                      real[:, ::1] colors, real[::1] alphas,
                      int[::1] entry_splat, long long[::1] tile_starts,
                      int tiles_x, int tile_size,
                      real[:, :, ::1] image, real[:, ::1] final_t,
                      int[:, ::1] last_contrib, int threads=1):
    cdef Py_ssize_t n_tiles = tile_starts.shape[0] - 1
    cdef Py_ssize_t height = final_t.shape[0]
    cdef Py_ssize_t width = final_t.shape[1]
    cdef Py_ssize_t tile, e_lo, e_hi, e, s, px, py, x_lo, x_hi, y_lo, y_hi
    cdef int last
    cdef real fx, fy, dx, dy, power, alpha_ix, weight, trans
    cdef real acc_r, acc_g, acc_b, acc_a
    cdef real neg_half = <real>-0.5
    cdef real zero = <real>0.0
    cdef real one = <real>1.0
    cdef real power_floor = <real>-4.5
    cdef real alpha_floor = <real>(1.0 / 255.0)
    cdef real trans_floor = <real>1e-4

    for tile in prange(n_tiles, nogil=True, schedule="dynamic",
                       num_threads=threads):
        y_lo = (tile // tiles_x) * tile_size
        x_lo = (tile % tiles_x) * tile_size
        x_hi = x_lo + tile_size
        y_hi = y_lo + tile_size
        if x_hi > width:
            x_hi = width
        if y_hi > height:
            y_hi = height
        e_lo = tile_starts[tile]
        e_hi = tile_starts[tile + 1]
        if e_lo == e_hi:
            continue  # outputs already hold the empty-run values
        for py in range(y_lo, y_hi):
            fy = <real>py
            for px in range(x_lo, x_hi):
                fx = <real>px
                trans = one
                acc_r = zero
                acc_g = zero
                acc_b = zero
                acc_a = zero
                last = 0
                for e in range(e_lo, e_hi):
                    s = entry_splat[e]
                    dx = fx - means2d[s, 0]
                    dy = fy - means2d[s, 1]
                    power = (neg_half * (conics[s, 0] * dx * dx + conics[s, 2] * dy * dy)
                             - conics[s, 1] * dx * dy)
                    if power > zero or power < power_floor:
                        continue
                    alpha_ix = alphas[s] * _exp(power)
                    if alpha_ix < alpha_floor:
                        continue
                    weight = alpha_ix * trans
                    acc_r = acc_r + colors[s, 0] * weight
                    acc_g = acc_g + colors[s, 1] * weight
                    acc_b = acc_b + colors[s, 2] * weight
                    acc_a = acc_a + weight
                    trans = trans * (one - alpha_ix)
                    last = <int>(e - e_lo) + 1
                    if trans < trans_floor:
                        break
                image[py, px, 0] = acc_r
                image[py, px, 1] = acc_g
                image[py, px, 2] = acc_b
                image[py, px, 3] = acc_a
                final_t[py, px] = trans
                last_contrib[py, px] = last


def composite_backward(double[:, ::1] means2d, double[:, ::1] conics,
                       double[:, ::1] colors, double[::1] alphas,
                       int[::1] entry_splat, long long[::1] tile_starts,
                       int tiles_x, int tile_size,
                       double[:, ::1] final_t, int[:, ::1] last_contrib,
                       double[:, :, ::1] grad_image,
                       double[:, ::1] entry_grads, int threads=1):
    cdef Py_ssize_t n_tiles = tile_starts.shape[0] - 1
    cdef Py_ssize_t height = final_t.shape[0]
    cdef Py_ssize_t width = final_t.shape[1]
    cdef Py_ssize_t tile, e_lo, e, s, px, py, x_lo, x_hi, y_lo, y_hi
    cdef int last
    cdef double fx, fy, dx, dy, ca, cb, cc, power, gexp, alpha_ix, one_m
    cdef double trans, weight, d_alpha_ix, d_power
    cdef double g_r, g_g, g_b, g_a, suf_r, suf_g, suf_b, suf_a

    for tile in prange(n_tiles, nogil=True, schedule="dynamic",
                       num_threads=threads):
        y_lo = (tile // tiles_x) * tile_size
        x_lo = (tile % tiles_x) * tile_size
        x_hi = x_lo + tile_size
        y_hi = y_lo + tile_size
        if x_hi > width:
            x_hi = width
        if y_hi > height:
            y_hi = height
        e_lo = tile_starts[tile]
        for py in range(y_lo, y_hi):
            fy = <double>py
            for px in range(x_lo, x_hi):
                last = last_contrib[py, px]
                if last == 0:
                    continue
                fx = <double>px
                g_r = grad_image[py, px, 0]
                g_g = grad_image[py, px, 1]
                g_b = grad_image[py, px, 2]
                g_a = grad_image[py, px, 3]
                if g_r == 0.0 and g_g == 0.0 and g_b == 0.0 and g_a == 0.0:
                    continue
                trans = final_t[py, px]
                suf_r = 0.0
                suf_g = 0.0
                suf_b = 0.0
                suf_a = 0.0
                for e in range(e_lo + last - 1, e_lo - 1, -1):
                    s = entry_splat[e]
                    dx = fx - means2d[s, 0]
                    dy = fy - means2d[s, 1]
                    ca = conics[s, 0]
                    cb = conics[s, 1]
                    cc = conics[s, 2]
                    power = -0.5 * (ca * dx * dx + cc * dy * dy) - cb * dx * dy
                    if power > 0.0 or power < -4.5:
                        continue
                    gexp = exp(power)
                    alpha_ix = alphas[s] * gexp
                    if alpha_ix < 1.0 / 255.0:
                        continue
                    one_m = 1.0 - alpha_ix
                    trans = trans / one_m
                    weight = alpha_ix * trans
                    entry_grads[e, 5] += weight * g_r
                    entry_grads[e, 6] += weight * g_g
                    entry_grads[e, 7] += weight * g_b
                    d_alpha_ix = (trans * (colors[s, 0] * g_r + colors[s, 1] * g_g
                                           + colors[s, 2] * g_b + g_a)
                                  - (suf_r * g_r + suf_g * g_g + suf_b * g_b
                                     + suf_a * g_a) / one_m)
                    entry_grads[e, 8] += gexp * d_alpha_ix
                    d_power = alpha_ix * d_alpha_ix
                    entry_grads[e, 0] += d_power * (ca * dx + cb * dy)
                    entry_grads[e, 1] += d_power * (cc * dy + cb * dx)
                    entry_grads[e, 2] += d_power * (-0.5 * dx * dx)
                    entry_grads[e, 3] += d_power * (-dx * dy)
                    entry_grads[e, 4] += d_power * (-0.5 * dy * dy)
                    suf_r = suf_r + colors[s, 0] * weight
                    suf_g = suf_g + colors[s, 1] * weight
                    suf_b = suf_b + colors[s, 2] * weight
                    suf_a = suf_a + weight


def project_stage1(const double[:, ::1] mu_p, const double[:, ::1] mu_d,
                   const double[:, :, ::1] adjust,
                   const double[:, :, ::1] precision_dd,
                   double px, double py, double pz,
                   double[:, ::1] view, double[:, ::1] mean_adj,
                   double[::1] quad, unsigned char[::1] stage, int threads=1):
    cdef Py_ssize_t n = mu_p.shape[0]
    cdef Py_ssize_t i
    cdef double dx, dy, dz, dist, inv_dist, vx, vy, vz, d0, d1, d2, sx, sy, sz

    for i in prange(n, nogil=True, schedule="static", num_threads=threads):
        dx = mu_p[i, 0] - px
        dy = mu_p[i, 1] - py
        dz = mu_p[i, 2] - pz
        dist = sqrt(dx * dx + dy * dy + dz * dz)
        if not dist > 1e-12:
            stage[i] = 1
            continue
        inv_dist = 1.0 / dist
        vx = dx * inv_dist
        vy = dy * inv_dist
        vz = dz * inv_dist
        d0 = vx - mu_d[i, 0]
        d1 = vy - mu_d[i, 1]
        d2 = vz - mu_d[i, 2]
        sx = adjust[i, 0, 0] * d0 + adjust[i, 0, 1] * d1 + adjust[i, 0, 2] * d2
        sy = adjust[i, 1, 0] * d0 + adjust[i, 1, 1] * d1 + adjust[i, 1, 2] * d2
        sz = adjust[i, 2, 0] * d0 + adjust[i, 2, 1] * d1 + adjust[i, 2, 2] * d2
        view[i, 0] = vx
        view[i, 1] = vy
        view[i, 2] = vz
        mean_adj[i, 0] = mu_p[i, 0] + sx
        mean_adj[i, 1] = mu_p[i, 1] + sy
        mean_adj[i, 2] = mu_p[i, 2] + sz
        quad[i] = (precision_dd[i, 0, 0] * d0 * d0
                   + precision_dd[i, 1, 1] * d1 * d1
                   + precision_dd[i, 2, 2] * d2 * d2
                   + 2.0 * (precision_dd[i, 0, 1] * d0 * d1
                            + precision_dd[i, 0, 2] * d0 * d2
                            + precision_dd[i, 1, 2] * d1 * d2))


def project_stage2(const double[:, ::1] view, const double[:, ::1] mean_adj,
                   const double[:, ::1] sh,
                   const double[:, :, ::1] sigma_prime,
                   const double[:, ::1] rot, double px, double py, double pz,
                   double near, double far, double f, double ox, double oy,
                   double lim_x, double lim_y, double width, double height,
                   double low_pass, double sh_c0, double sh_c1,
                   double[:, ::1] means2d, double[:, ::1] conics,
                   double[:, ::1] colors, double[::1] depths,
                   int[:, ::1] radii, unsigned char[::1] stage, int threads=1):
    cdef Py_ssize_t n = view.shape[0]
    cdef Py_ssize_t i
    cdef double r00 = rot[0, 0], r01 = rot[0, 1], r02 = rot[0, 2]
    cdef double r10 = rot[1, 0], r11 = rot[1, 1], r12 = rot[1, 2]
    cdef double r20 = rot[2, 0], r21 = rot[2, 1], r22 = rot[2, 2]
    cdef double vx, vy, vz, cxw, cyw, czw, tx, ty, tz, cr, cg, cb
    cdef double inv_z, u, v, xc, yc, j00, j02, j12
    cdef double b00, b01, b02, b10, b11, b12, b20, b21, b22
    cdef double m00, m01, m02, m11, m12, m22
    cdef double jm00, jm01, jm02, jm11, jm12
    cdef double cov_a, cov_b, cov_c, det, inv_det, rx, ry
    cdef int irx, iry

    for i in prange(n, nogil=True, schedule="static", num_threads=threads):
        if stage[i] != 0:
            continue
        cxw = mean_adj[i, 0] - px
        cyw = mean_adj[i, 1] - py
        czw = mean_adj[i, 2] - pz
        tx = r00 * cxw + r01 * cyw + r02 * czw
        ty = r10 * cxw + r11 * cyw + r12 * czw
        tz = r20 * cxw + r21 * cyw + r22 * czw
        if not (tz >= near and tz <= far):
            stage[i] = 3
            continue

        vx = view[i, 0]
        vy = view[i, 1]
        vz = view[i, 2]
        cr = (sh_c0 * sh[i, 0] - sh_c1 * vy * sh[i, 3]
              + sh_c1 * vz * sh[i, 6] - sh_c1 * vx * sh[i, 9] + 0.5)
        cg = (sh_c0 * sh[i, 1] - sh_c1 * vy * sh[i, 4]
              + sh_c1 * vz * sh[i, 7] - sh_c1 * vx * sh[i, 10] + 0.5)
        cb = (sh_c0 * sh[i, 2] - sh_c1 * vy * sh[i, 5]
              + sh_c1 * vz * sh[i, 8] - sh_c1 * vx * sh[i, 11] + 0.5)
        if cr < 0.0:
            cr = 0.0
        elif cr > 1.0:
            cr = 1.0
        if cg < 0.0:
            cg = 0.0
        elif cg > 1.0:
            cg = 1.0
        if cb < 0.0:
            cb = 0.0
        elif cb > 1.0:
            cb = 1.0

        inv_z = 1.0 / tz
        u = f * tx * inv_z + ox
        v = f * ty * inv_z + oy
        xc = tx * inv_z
        if xc < -lim_x:
            xc = -lim_x
        elif xc > lim_x:
            xc = lim_x
        xc = xc * tz
        yc = ty * inv_z
        if yc < -lim_y:
            yc = -lim_y
        elif yc > lim_y:
            yc = lim_y
        yc = yc * tz
        j00 = f * inv_z
        j02 = -f * xc * inv_z * inv_z
        j12 = -f * yc * inv_z * inv_z

        b00 = sigma_prime[i, 0, 0] * r00 + sigma_prime[i, 0, 1] * r01 + sigma_prime[i, 0, 2] * r02
        b01 = sigma_prime[i, 0, 0] * r10 + sigma_prime[i, 0, 1] * r11 + sigma_prime[i, 0, 2] * r12
        b02 = sigma_prime[i, 0, 0] * r20 + sigma_prime[i, 0, 1] * r21 + sigma_prime[i, 0, 2] * r22
        b10 = sigma_prime[i, 1, 0] * r00 + sigma_prime[i, 1, 1] * r01 + sigma_prime[i, 1, 2] * r02
        b11 = sigma_prime[i, 1, 0] * r10 + sigma_prime[i, 1, 1] * r11 + sigma_prime[i, 1, 2] * r12
        b12 = sigma_prime[i, 1, 0] * r20 + sigma_prime[i, 1, 1] * r21 + sigma_prime[i, 1, 2] * r22
        b20 = sigma_prime[i, 2, 0] * r00 + sigma_prime[i, 2, 1] * r01 + sigma_prime[i, 2, 2] * r02
        b21 = sigma_prime[i, 2, 0] * r10 + sigma_prime[i, 2, 1] * r11 + sigma_prime[i, 2, 2] * r12
        b22 = sigma_prime[i, 2, 0] * r20 + sigma_prime[i, 2, 1] * r21 + sigma_prime[i, 2, 2] * r22
        m00 = r00 * b00 + r01 * b10 + r02 * b20
        m01 = r00 * b01 + r01 * b11 + r02 * b21
        m02 = r00 * b02 + r01 * b12 + r02 * b22
        m11 = r10 * b01 + r11 * b11 + r12 * b21
        m12 = r10 * b02 + r11 * b12 + r12 * b22
        m22 = r20 * b02 + r21 * b12 + r22 * b22

        jm00 = j00 * m00 + j02 * m02
        jm01 = j00 * m01 + j02 * m12
        jm02 = j00 * m02 + j02 * m22
        jm11 = j00 * m11 + j12 * m12
        jm12 = j00 * m12 + j12 * m22
        cov_a = jm00 * j00 + jm02 * j02 + low_pass
        cov_b = jm01 * j00 + jm02 * j12
        cov_c = jm11 * j00 + jm12 * j12 + low_pass

        det = cov_a * cov_c - cov_b * cov_b
        if not (isfinite(det) and det > 0.0 and isfinite(u) and isfinite(v)):
            stage[i] = 4
            continue
        inv_det = 1.0 / det

        rx = ceil(3.0 * sqrt(cov_a))
        if rx > 1048576.0:
            rx = 1048576.0
        ry = ceil(3.0 * sqrt(cov_c))
        if ry > 1048576.0:
            ry = 1048576.0
        irx = <int>rx
        iry = <int>ry
        if not (u + irx >= 0.0 and u - irx <= width - 1.0
                and v + iry >= 0.0 and v - iry <= height - 1.0):
            stage[i] = 5
            continue

        means2d[i, 0] = u
        means2d[i, 1] = v
        conics[i, 0] = cov_c * inv_det
        conics[i, 1] = -cov_b * inv_det
        conics[i, 2] = cov_a * inv_det
        colors[i, 0] = cr
        colors[i, 1] = cg
        colors[i, 2] = cb
        depths[i] = tz
        radii[i, 0] = irx
        radii[i, 1] = iry
