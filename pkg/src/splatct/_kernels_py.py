"""Pure-Python rasterizer kernels.

Fallback backend used when the compiled extension is missing (or when
``SPLATCT_BACKEND=python`` forces it). The compositing loops are written
scalar-for-scalar identically to the compiled kernels and use ``math.exp``,
which matches libm's ``exp`` bit for bit; the projection kernels run the same
elementwise expressions through numpy, which matches compiled scalar code
exactly because every operation involved (add, multiply, divide, sqrt, ceil,
compare) is IEEE-exact. Double-precision output therefore agrees with the
compiled backend bit for bit. This backend is orders of magnitude slower at
compositing and meant for correctness work, not throughput.

Shared compositing contract (both backends):

- splats arrive pre-sorted into per-tile runs (``tile_starts`` delimits runs
  over ``entry_splat``, front to back within each tile),
- a splat's screen-space response at pixel offset (dx, dy) is
  ``exp(-0.5 (a dx^2 + c dy^2) - b dx dy)`` with conic (a, b, c),
- responses with positive exponent or exponent below -4.5 are skipped,
- effective alphas below 1/255 are skipped,
- front-to-back over-compositing stops once transmittance drops below 1e-4,
- the output stores raw premultiplied sums: RGB plus accumulated alpha.

Shared projection contract (both backends):

- every per-Gaussian quantity is a pure function of that Gaussian's row, so
  output rows never depend on which other rows are present,
- ``stage`` tracks each row's fate: 0 drawn, 1 view-degenerate, 2 alpha-culled
  (marked by the caller between the two stages), 3 depth-culled, 4 projection-
  culled, 5 viewport-culled; kernels only touch rows still at 0,
- output rows for culled Gaussians keep their initialized values,
- the opacity modulation ``exp`` happens in the caller, in numpy, between the
  two stages; keeping that one transcendental out of compiled code is what
  lets both backends agree bitwise (``np.exp`` and libm differ by an ulp on
  some inputs).
"""

import math

import numpy as np

BACKEND = "python"


def composite_forward(means2d, conics, colors, alphas, entry_splat, tile_starts,
                      tiles_x, tile_size, image, final_t, last_contrib,
                      threads=1):
    """Front-to-back over-composite of sorted splat runs, one run per tile.

    ``image`` (H, W, 4), ``final_t`` (H, W) and ``last_contrib`` (H, W) are
    written in place. ``last_contrib`` holds, per pixel, 1 + the tile-local
    index of the last splat that contributed (0 when none did); the backward
    kernel restarts its reverse sweep there. ``threads`` is accepted for
    signature parity and ignored.
    """
    height, width = final_t.shape
    n_tiles = tile_starts.shape[0] - 1
    for tile in range(n_tiles):
        ty, tx = divmod(tile, tiles_x)
        x_lo = tx * tile_size
        y_lo = ty * tile_size
        x_hi = min(x_lo + tile_size, width)
        y_hi = min(y_lo + tile_size, height)
        e_lo = int(tile_starts[tile])
        e_hi = int(tile_starts[tile + 1])
        if e_lo == e_hi:
            continue  # outputs already hold the empty-run values
        for py in range(y_lo, y_hi):
            fy = float(py)
            for px in range(x_lo, x_hi):
                fx = float(px)
                trans = 1.0
                acc_r = 0.0
                acc_g = 0.0
                acc_b = 0.0
                acc_a = 0.0
                last = 0
                for e in range(e_lo, e_hi):
                    s = entry_splat[e]
                    dx = fx - means2d[s, 0]
                    dy = fy - means2d[s, 1]
                    power = (-0.5 * (conics[s, 0] * dx * dx + conics[s, 2] * dy * dy)
                             - conics[s, 1] * dx * dy)
                    if power > 0.0 or power < -4.5:
                        continue
                    alpha_ix = alphas[s] * math.exp(power)
                    if alpha_ix < 1.0 / 255.0:
                        continue
                    weight = alpha_ix * trans
                    acc_r += colors[s, 0] * weight
                    acc_g += colors[s, 1] * weight
                    acc_b += colors[s, 2] * weight
                    acc_a += weight
                    trans = trans * (1.0 - alpha_ix)
                    last = e - e_lo + 1
                    if trans < 1e-4:
                        break
                image[py, px, 0] = acc_r
                image[py, px, 1] = acc_g
                image[py, px, 2] = acc_b
                image[py, px, 3] = acc_a
                final_t[py, px] = trans
                last_contrib[py, px] = last


def composite_backward(means2d, conics, colors, alphas, entry_splat, tile_starts,
                       tiles_x, tile_size, final_t, last_contrib, grad_image,
                       entry_grads, threads=1):
    """Adjoint of :func:`composite_forward`, double precision only.

    Sweeps each pixel's contributors back to front, reconstructing the
    running transmittance by division (alphas are capped at 0.99 upstream, so
    ``1 - alpha`` stays away from zero). Per-entry gradients land in
    ``entry_grads`` (E, 9), ordered mean_x, mean_y, conic_a, conic_b, conic_c,
    r, g, b, alpha; splats skipped by a forward cutoff get exact zeros, the
    subgradient of the truncated forward.
    """
    height, width = final_t.shape
    n_tiles = tile_starts.shape[0] - 1
    for tile in range(n_tiles):
        ty, tx = divmod(tile, tiles_x)
        x_lo = tx * tile_size
        y_lo = ty * tile_size
        x_hi = min(x_lo + tile_size, width)
        y_hi = min(y_lo + tile_size, height)
        e_lo = int(tile_starts[tile])
        for py in range(y_lo, y_hi):
            fy = float(py)
            for px in range(x_lo, x_hi):
                last = int(last_contrib[py, px])
                if last == 0:
                    continue
                fx = float(px)
                g_r = float(grad_image[py, px, 0])
                g_g = float(grad_image[py, px, 1])
                g_b = float(grad_image[py, px, 2])
                g_a = float(grad_image[py, px, 3])
                if g_r == 0.0 and g_g == 0.0 and g_b == 0.0 and g_a == 0.0:
                    continue
                trans = float(final_t[py, px])
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
                    gexp = math.exp(power)
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
                    suf_r += colors[s, 0] * weight
                    suf_g += colors[s, 1] * weight
                    suf_b += colors[s, 2] * weight
                    suf_a += weight


def project_stage1(mu_p, mu_d, adjust, precision_dd, px, py, pz,
                   view, mean_adj, quad, stage, threads=1):
    """View direction, slicing offset, mean shift and opacity quadratic.

    Writes ``view`` (n, 3), ``mean_adj`` (n, 3) and ``quad`` (n,) in place
    for every row whose camera distance is nondegenerate; the rest are marked
    ``stage = 1`` and left untouched. ``threads`` is accepted for signature
    parity and ignored.
    """
    dx = mu_p[:, 0] - px
    dy = mu_p[:, 1] - py
    dz = mu_p[:, 2] - pz
    dist = np.sqrt(dx * dx + dy * dy + dz * dz)
    live = dist > 1e-12
    stage[~live] = 1
    idx = np.nonzero(live)[0]

    inv_dist = 1.0 / dist[idx]
    vx = dx[idx] * inv_dist
    vy = dy[idx] * inv_dist
    vz = dz[idx] * inv_dist
    d0 = vx - mu_d[idx, 0]
    d1 = vy - mu_d[idx, 1]
    d2 = vz - mu_d[idx, 2]
    adj = adjust[idx]
    sx = adj[:, 0, 0] * d0 + adj[:, 0, 1] * d1 + adj[:, 0, 2] * d2
    sy = adj[:, 1, 0] * d0 + adj[:, 1, 1] * d1 + adj[:, 1, 2] * d2
    sz = adj[:, 2, 0] * d0 + adj[:, 2, 1] * d1 + adj[:, 2, 2] * d2
    q = precision_dd[idx]
    view[idx, 0] = vx
    view[idx, 1] = vy
    view[idx, 2] = vz
    mean_adj[idx, 0] = mu_p[idx, 0] + sx
    mean_adj[idx, 1] = mu_p[idx, 1] + sy
    mean_adj[idx, 2] = mu_p[idx, 2] + sz
    quad[idx] = (q[:, 0, 0] * d0 * d0 + q[:, 1, 1] * d1 * d1
                 + q[:, 2, 2] * d2 * d2
                 + 2.0 * (q[:, 0, 1] * d0 * d1 + q[:, 0, 2] * d0 * d2
                          + q[:, 1, 2] * d1 * d2))


def project_stage2(view, mean_adj, sh, sigma_prime, rot, px, py, pz,
                   near, far, f, ox, oy, lim_x, lim_y, width, height,
                   low_pass, sh_c0, sh_c1, means2d, conics, colors, depths,
                   radii, stage, threads=1):
    """Camera transform, shading, EWA projection and screen-space culls.

    Processes rows still at ``stage = 0``: rotates the adjusted mean into the
    camera frame (depth cull -> 3), shades degree-1 spherical harmonics along
    the view direction, projects through the pinhole at (``f``, ``ox``,
    ``oy``) with the Jacobian evaluated at a frustum point clamped to
    ``lim_x``/``lim_y`` times the depth, forms the 2D covariance plus
    ``low_pass`` on the diagonal (nonpositive or nonfinite determinant
    cull -> 4), and drops splats whose 3-sigma box misses the viewport
    (-> 5). Survivors get ``means2d``, ``conics``, ``colors``, ``depths`` and
    integer ``radii`` written in place. ``threads`` is accepted for signature
    parity and ignored.
    """
    idx = np.nonzero(stage == 0)[0]
    cxw = mean_adj[idx, 0] - px
    cyw = mean_adj[idx, 1] - py
    czw = mean_adj[idx, 2] - pz
    r00, r01, r02 = rot[0]
    r10, r11, r12 = rot[1]
    r20, r21, r22 = rot[2]
    tx = r00 * cxw + r01 * cyw + r02 * czw
    ty = r10 * cxw + r11 * cyw + r12 * czw
    tz = r20 * cxw + r21 * cyw + r22 * czw
    live = (tz >= near) & (tz <= far)
    stage[idx[~live]] = 3
    idx, tx, ty, tz = idx[live], tx[live], ty[live], tz[live]

    vx = view[idx, 0]
    vy = view[idx, 1]
    vz = view[idx, 2]
    coeff = sh[idx].reshape(-1, 4, 3)
    rgb = (sh_c0 * coeff[:, 0]
           - sh_c1 * vy[:, None] * coeff[:, 1]
           + sh_c1 * vz[:, None] * coeff[:, 2]
           - sh_c1 * vx[:, None] * coeff[:, 3]
           + 0.5)
    color = np.clip(rgb, 0.0, 1.0)

    inv_z = 1.0 / tz
    u = f * tx * inv_z + ox
    v = f * ty * inv_z + oy
    xc = np.clip(tx * inv_z, -lim_x, lim_x) * tz
    yc = np.clip(ty * inv_z, -lim_y, lim_y) * tz
    j00 = f * inv_z
    j02 = -f * xc * inv_z * inv_z
    j12 = -f * yc * inv_z * inv_z

    sp = sigma_prime[idx]
    b00 = sp[:, 0, 0] * r00 + sp[:, 0, 1] * r01 + sp[:, 0, 2] * r02
    b01 = sp[:, 0, 0] * r10 + sp[:, 0, 1] * r11 + sp[:, 0, 2] * r12
    b02 = sp[:, 0, 0] * r20 + sp[:, 0, 1] * r21 + sp[:, 0, 2] * r22
    b10 = sp[:, 1, 0] * r00 + sp[:, 1, 1] * r01 + sp[:, 1, 2] * r02
    b11 = sp[:, 1, 0] * r10 + sp[:, 1, 1] * r11 + sp[:, 1, 2] * r12
    b12 = sp[:, 1, 0] * r20 + sp[:, 1, 1] * r21 + sp[:, 1, 2] * r22
    b20 = sp[:, 2, 0] * r00 + sp[:, 2, 1] * r01 + sp[:, 2, 2] * r02
    b21 = sp[:, 2, 0] * r10 + sp[:, 2, 1] * r11 + sp[:, 2, 2] * r12
    b22 = sp[:, 2, 0] * r20 + sp[:, 2, 1] * r21 + sp[:, 2, 2] * r22
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
    live = np.isfinite(det) & (det > 0.0) & np.isfinite(u) & np.isfinite(v)
    stage[idx[~live]] = 4
    (idx, color, tz, u, v, cov_a, cov_b, cov_c, det) = (
        idx[live], color[live], tz[live], u[live], v[live],
        cov_a[live], cov_b[live], cov_c[live], det[live])
    inv_det = 1.0 / det

    rx = np.minimum(np.ceil(3.0 * np.sqrt(cov_a)), 1 << 20).astype(np.int32)
    ry = np.minimum(np.ceil(3.0 * np.sqrt(cov_c)), 1 << 20).astype(np.int32)
    live = ((u + rx >= 0.0) & (u - rx <= width - 1.0)
            & (v + ry >= 0.0) & (v - ry <= height - 1.0))
    stage[idx[~live]] = 5
    (idx, color, tz, u, v, rx, ry, cov_a, cov_b, cov_c, inv_det) = (
        idx[live], color[live], tz[live], u[live], v[live], rx[live],
        ry[live], cov_a[live], cov_b[live], cov_c[live], inv_det[live])

    means2d[idx, 0] = u
    means2d[idx, 1] = v
    conics[idx, 0] = cov_c * inv_det
    conics[idx, 1] = -cov_b * inv_det
    conics[idx, 2] = cov_a * inv_det
    colors[idx] = color
    depths[idx] = tz
    radii[idx, 0] = rx
    radii[idx, 1] = ry
