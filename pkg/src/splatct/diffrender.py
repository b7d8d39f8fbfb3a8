"""Differentiable rendering: photometric loss, analytic parameter gradients,
Adam with polynomial learning-rate decay, and the fine-tuning loop.

The backward pass replays the forward renderer in double precision. Per pixel
the forward keeps only the final transmittance and the index of the last
contributor; the backward kernel walks each tile's contributors back to front,
reconstructing the running transmittance by division (valid because alphas are
capped at 0.99 upstream). Per-splat gradients then flow through the chain

    compositing -> screen-space Gaussian -> conic/inverse -> EWA Jacobian
    -> camera frame -> view-direction slicing -> 6D covariance -> Cholesky
    factor -> raw parameters (and SH / sigmoid for color and opacity),

entirely as vectorized array expressions. Gaussians culled by the forward
pass (or excluded by a group mask) receive exactly zero gradient, the
subgradient of the truncated forward.

The fine-tuning loop keeps the Gaussian set fixed: no densification, pruning
or coefficient-degree scheduling, just per-parameter Adam on all 40 values of
every Gaussian. With a fixed seed and one thread it is bit-reproducible.
"""

import csv
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import _ssim
from .sceneio import load_scene, save_scene
from .camera import Camera
from .core import (
    N_COV_RAW,
    N_SH,
    SH_C0,
    SH_C1,
    TRIL_I,
    TRIL_J,
    InvalidParameterError,
    cholesky_factor_batch,
)
from .priming import Scene
from .raster import (
    DEFAULT_CONFIG,
    RenderConfig,
    RenderState,
    _kernels_for,
    _resolve_threads,
    prepare_scene,
    render_with_state,
)

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
POLY_POWER = 0.9

# Parameter groups updated by the optimizer, in a fixed order. Positions get
# a smaller learning rate by default, mirroring common splatting practice.
PARAM_GROUPS = ("mu_p", "mu_d", "cov_raw", "sh", "opacity_raw")
DEFAULT_LR_SCALE = {"mu_p": 0.1}

TRACE_FIELDS = ("iteration", "lr", "l1", "ssim_loss", "total")


@dataclass(frozen=True)
class LossConfig:
    """Weights of the photometric loss: lambda_l1 * L1 + lambda_ssim * (1 - MS-SSIM).

    ``ms_ssim_weights`` must have one entry per scale; they are normalized to
    sum to one at construction (the conventional 5-scale set sums to 1.0001
    as published).
    """

    lambda_l1: float = 0.8
    lambda_ssim: float = 0.2
    ms_ssim_scales: int = 5
    ms_ssim_weights: tuple = _ssim.DEFAULT_WEIGHTS

    def __post_init__(self):
        if self.lambda_l1 < 0.0 or self.lambda_ssim < 0.0:
            raise InvalidParameterError("loss weights must be non-negative")
        if self.lambda_l1 == 0.0 and self.lambda_ssim == 0.0:
            raise InvalidParameterError("at least one loss weight must be positive")
        if self.ms_ssim_scales < 1:
            raise InvalidParameterError("ms_ssim_scales must be >= 1")
        weights = tuple(float(w) for w in self.ms_ssim_weights)
        if len(weights) != self.ms_ssim_scales:
            raise InvalidParameterError(
                f"need {self.ms_ssim_scales} ms_ssim_weights, got {len(weights)}")
        if any(w <= 0.0 for w in weights):
            raise InvalidParameterError("ms_ssim_weights must be positive")
        total = sum(weights)
        object.__setattr__(self, "ms_ssim_weights",
                           tuple(w / total for w in weights))


def ms_ssim(a, b, scales: int = 5, weights=_ssim.DEFAULT_WEIGHTS) -> float:
    """Multi-scale structural similarity in [-1, 1].

    11x11 Gaussian windows (sigma 1.5, K1=0.01, K2=0.03); per-scale
    contrast-structure means are combined as a weighted product (Wang et al.
    convention). Images smaller than 2^(scales-1) * 11 per side fall back to
    single-scale SSIM. An alpha channel, if present, is ignored.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 3 and a.shape[2] == 4:
        a = a[:, :, :3]
    if b.ndim == 3 and b.shape[2] == 4:
        b = b[:, :, :3]
    return _ssim.ms_ssim(a, b, scales, weights)


def _loss_parts(pred, gt, cfg: LossConfig):
    """(total, l1, ssim_loss, d total/d pred) comparing the RGB channels."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape[:2] != gt.shape[:2] or pred.ndim != 3 or gt.ndim != 3:
        raise InvalidParameterError(
            f"image shapes do not match: {pred.shape} vs {gt.shape}")
    p = pred[:, :, :3]
    g = gt[:, :, :3]
    diff = p - g
    l1 = float(np.mean(np.abs(diff)))
    grad = np.zeros(pred.shape)
    grad_rgb = cfg.lambda_l1 * np.sign(diff) / diff.size
    ssim_loss = 0.0
    if cfg.lambda_ssim > 0.0:
        value, g_ms = _ssim.ms_ssim_with_grad(
            p, g, cfg.ms_ssim_scales, cfg.ms_ssim_weights)
        ssim_loss = 1.0 - value
        grad_rgb = grad_rgb - cfg.lambda_ssim * g_ms
    grad[:, :, :3] = grad_rgb
    total = cfg.lambda_l1 * l1 + cfg.lambda_ssim * ssim_loss
    return total, l1, ssim_loss, grad


def loss(pred, gt, cfg: LossConfig = None):
    """Photometric loss and its analytic gradient with respect to ``pred``.

    Both images must share one shape, (H, W, 3) or (H, W, 4); only the RGB
    channels enter the loss, so an alpha slot in the returned gradient is
    zero. Returns ``(value, grad)``.
    """
    if cfg is None:
        cfg = LossConfig()
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise InvalidParameterError(
            f"image shapes do not match: {pred.shape} vs {gt.shape}")
    total, _, _, grad = _loss_parts(pred, gt, cfg)
    return total, grad


@dataclass
class GradientBuffer:
    """Loss partials for every per-Gaussian parameter, row-aligned with a scene."""

    mu_p: np.ndarray         # (N, 3)
    mu_d: np.ndarray         # (N, 3)
    cov_raw: np.ndarray      # (N, 21)
    sh: np.ndarray           # (N, 12)
    opacity_raw: np.ndarray  # (N,)

    @classmethod
    def zeros(cls, n: int) -> "GradientBuffer":
        return cls(mu_p=np.zeros((n, 3)), mu_d=np.zeros((n, 3)),
                   cov_raw=np.zeros((n, N_COV_RAW)), sh=np.zeros((n, N_SH)),
                   opacity_raw=np.zeros(n))

    def groups(self):
        """(name, array) pairs in the fixed parameter-group order."""
        return tuple((name, getattr(self, name)) for name in PARAM_GROUPS)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(arr)) for _, arr in self.groups())


def _backward_rows(scene: Scene, camera: Camera, config: RenderConfig, rows,
                   g_splat: np.ndarray, buf: GradientBuffer) -> None:
    """Chain per-splat gradients back to the raw parameters of ``rows``.

    ``g_splat`` is (M, 9): mean_x, mean_y, conic_a, conic_b, conic_c, r, g, b,
    alpha, exactly as the compositing backward kernel emits them. The forward
    intermediates are recomputed here with the same expressions the projection
    uses, so the clamp/cap gates reopen in the same places.
    """
    prep = prepare_scene(scene, config.w_mode)
    terms = prep.terms
    mu_p = scene.mu_p[rows]
    mu_d = scene.mu_d[rows]
    sh = scene.sh[rows]
    opacity = prep.opacity[rows]
    adj = terms.adjust[rows]
    q = terms.precision_dd[rows]
    sp_pd = terms.sigma[rows][:, :3, 3:]
    w_norm = terms.w_norm[rows]

    pos = camera.position
    rot = camera.rotation
    f = camera.focal

    # Forward replay (names follow the projection code).
    dxw = mu_p[:, 0] - pos[0]
    dyw = mu_p[:, 1] - pos[1]
    dzw = mu_p[:, 2] - pos[2]
    dist = np.sqrt(dxw * dxw + dyw * dyw + dzw * dzw)
    inv_dist = 1.0 / dist
    vx, vy, vz = dxw * inv_dist, dyw * inv_dist, dzw * inv_dist

    d0 = vx - mu_d[:, 0]
    d1 = vy - mu_d[:, 1]
    d2 = vz - mu_d[:, 2]
    dvec = np.stack([d0, d1, d2], axis=1)
    svec = np.einsum("nij,nj->ni", adj, dvec)
    quad = (q[:, 0, 0] * d0 * d0 + q[:, 1, 1] * d1 * d1 + q[:, 2, 2] * d2 * d2
            + 2.0 * (q[:, 0, 1] * d0 * d1 + q[:, 0, 2] * d0 * d2
                     + q[:, 1, 2] * d1 * d2))
    w = np.exp(-0.5 * quad) * w_norm
    cap_open = opacity * w < config.alpha_max

    cxw = mu_p[:, 0] + svec[:, 0] - pos[0]
    cyw = mu_p[:, 1] + svec[:, 1] - pos[1]
    czw = mu_p[:, 2] + svec[:, 2] - pos[2]
    tx = rot[0, 0] * cxw + rot[0, 1] * cyw + rot[0, 2] * czw
    ty = rot[1, 0] * cxw + rot[1, 1] * cyw + rot[1, 2] * czw
    tz = rot[2, 0] * cxw + rot[2, 1] * cyw + rot[2, 2] * czw

    coeff = sh.reshape(-1, 4, 3)
    rgb_pre = (SH_C0 * coeff[:, 0]
               - SH_C1 * vy[:, None] * coeff[:, 1]
               + SH_C1 * vz[:, None] * coeff[:, 2]
               - SH_C1 * vx[:, None] * coeff[:, 3]
               + 0.5)
    clip_open = (rgb_pre > 0.0) & (rgb_pre < 1.0)

    inv_z = 1.0 / tz
    lim_x = 1.3 * camera.width / (2.0 * f)
    lim_y = 1.3 * camera.height / (2.0 * f)
    ratio_x = tx * inv_z
    ratio_y = ty * inv_z
    inside_x = np.abs(ratio_x) <= lim_x
    inside_y = np.abs(ratio_y) <= lim_y
    xc = np.clip(ratio_x, -lim_x, lim_x) * tz
    yc = np.clip(ratio_y, -lim_y, lim_y) * tz
    j00 = f * inv_z
    j02 = -f * xc * inv_z * inv_z
    j12 = -f * yc * inv_z * inv_z

    sp = terms.sigma_prime[rows]
    m3 = np.einsum("ij,njk,lk->nil", rot, sp, rot)
    m00, m01, m02 = m3[:, 0, 0], m3[:, 0, 1], m3[:, 0, 2]
    m11, m12, m22 = m3[:, 1, 1], m3[:, 1, 2], m3[:, 2, 2]

    jm00 = j00 * m00 + j02 * m02
    jm01 = j00 * m01 + j02 * m12
    jm02 = j00 * m02 + j02 * m22
    jm11 = j00 * m11 + j12 * m12
    jm12 = j00 * m12 + j12 * m22
    cov_a = jm00 * j00 + jm02 * j02 + config.low_pass
    cov_b = jm01 * j00 + jm02 * j12
    cov_c = jm11 * j00 + jm12 * j12 + config.low_pass
    inv_det = 1.0 / (cov_a * cov_c - cov_b * cov_b)
    ia = cov_c * inv_det
    ib = -cov_b * inv_det
    ic = cov_a * inv_det

    # --- reverse sweep -----------------------------------------------------
    g_u = g_splat[:, 0]
    g_v = g_splat[:, 1]
    g_ia = g_splat[:, 2]
    g_ib = g_splat[:, 3]
    g_ic = g_splat[:, 4]
    g_color = g_splat[:, 5:8]
    g_alpha = g_splat[:, 8]

    # conic = inverse of cov2d: dL/dX = -X^-T G X^-T, collapsed to the three
    # stored entries (the off-diagonal appears once in the forward).
    g_cov_a = -(ia * ia * g_ia + ia * ib * g_ib + ib * ib * g_ic)
    g_cov_b = -(2.0 * ia * ib * g_ia + (ia * ic + ib * ib) * g_ib
                + 2.0 * ib * ic * g_ic)
    g_cov_c = -(ib * ib * g_ia + ib * ic * g_ib + ic * ic * g_ic)

    g_jm00 = g_cov_a * j00
    g_jm01 = g_cov_b * j00
    g_jm02 = g_cov_a * j02 + g_cov_b * j12
    g_jm11 = g_cov_c * j00
    g_jm12 = g_cov_c * j12
    g_j00 = (g_cov_a * jm00 + g_cov_b * jm01 + g_cov_c * jm11
             + g_jm00 * m00 + g_jm01 * m01 + g_jm02 * m02
             + g_jm11 * m11 + g_jm12 * m12)
    g_j02 = (g_cov_a * jm02
             + g_jm00 * m02 + g_jm01 * m12 + g_jm02 * m22)
    g_j12 = (g_cov_b * jm02 + g_cov_c * jm12
             + g_jm11 * m12 + g_jm12 * m22)

    # Camera-frame covariance M = R SP R^T. Only the six unique entries were
    # read, so the unique-entry grads sit on and above the diagonal; the
    # asymmetric split is harmless because every consumer downstream is
    # contracted against symmetric dependencies.
    g_m3 = np.zeros_like(m3)
    g_m3[:, 0, 0] = g_jm00 * j00
    g_m3[:, 0, 1] = g_jm01 * j00
    g_m3[:, 0, 2] = g_jm00 * j02 + g_jm02 * j00
    g_m3[:, 1, 1] = g_jm11 * j00
    g_m3[:, 1, 2] = g_jm01 * j02 + g_jm11 * j12 + g_jm12 * j00
    g_m3[:, 2, 2] = g_jm02 * j02 + g_jm12 * j12
    g_sp = np.einsum("ia,nij,jb->nab", rot, g_m3, rot)

    # Projection: u = f tx/tz + cx, and the Jacobian entries evaluated at the
    # frustum-clamped point (xc, yc, tz).
    g_tx = g_u * (f * inv_z)
    g_ty = g_v * (f * inv_z)
    g_tz = -(g_u * tx + g_v * ty) * f * inv_z * inv_z
    g_tz -= g_j00 * f * inv_z * inv_z
    g_xc = -g_j02 * f * inv_z * inv_z
    g_yc = -g_j12 * f * inv_z * inv_z
    g_tz += 2.0 * f * inv_z ** 3 * (g_j02 * xc + g_j12 * yc)
    g_tx += np.where(inside_x, g_xc, 0.0)
    g_ty += np.where(inside_y, g_yc, 0.0)
    g_tz += np.where(inside_x, 0.0, g_xc * np.sign(ratio_x) * lim_x)
    g_tz += np.where(inside_y, 0.0, g_yc * np.sign(ratio_y) * lim_y)

    # t = R (mu_p + s - pos)
    g_madj = np.stack([
        rot[0, 0] * g_tx + rot[1, 0] * g_ty + rot[2, 0] * g_tz,
        rot[0, 1] * g_tx + rot[1, 1] * g_ty + rot[2, 1] * g_tz,
        rot[0, 2] * g_tx + rot[1, 2] * g_ty + rot[2, 2] * g_tz,
    ], axis=1)

    # Color: clamp gate, then the four SH bands and the view direction.
    g_rgb = np.where(clip_open, g_color, 0.0)
    g_sh = np.empty((len(rows), N_SH))
    g_sh[:, 0:3] = SH_C0 * g_rgb
    g_sh[:, 3:6] = -SH_C1 * vy[:, None] * g_rgb
    g_sh[:, 6:9] = SH_C1 * vz[:, None] * g_rgb
    g_sh[:, 9:12] = -SH_C1 * vx[:, None] * g_rgb
    g_vx = -SH_C1 * np.sum(coeff[:, 3] * g_rgb, axis=1)
    g_vy = -SH_C1 * np.sum(coeff[:, 1] * g_rgb, axis=1)
    g_vz = SH_C1 * np.sum(coeff[:, 2] * g_rgb, axis=1)

    # Alpha: cap gate, sigmoid, and the directional modulation w.
    g_ap = np.where(cap_open, g_alpha, 0.0)
    g_opacity_raw = g_ap * w * opacity * (1.0 - opacity)
    g_w = g_ap * opacity
    g_quad = -0.5 * g_w * w
    qd = np.einsum("nij,nj->ni", q, dvec)
    g_d = 2.0 * g_quad[:, None] * qd
    g_q = g_quad[:, None, None] * dvec[:, :, None] * dvec[:, None, :]

    # Mean shift s = A d with A = sigma_pd Q; Schur complement
    # SP = sigma_pp - A sigma_pd^T.
    g_a = g_madj[:, :, None] * dvec[:, None, :]
    g_d += np.einsum("nij,ni->nj", adj, g_madj)
    g_t4 = -g_sp
    g_a += np.einsum("nij,njk->nik", g_t4, sp_pd)
    g_pd = np.einsum("nji,njk->nik", g_t4, adj)
    g_pd += np.einsum("nij,nkj->nik", g_a, q)
    g_q += np.einsum("nki,nkj->nij", sp_pd, g_a)
    g_sdd = -np.einsum("nij,njk,nkl->nil", q, g_q, q)
    if config.w_mode == "raw":
        # w_norm = (2 pi)^-1.5 det(Sigma_dd)^-0.5 contributes through det.
        g_sdd += (-0.5 * g_w * w)[:, None, None] * q

    g_sigma = np.zeros((len(rows), 6, 6))
    g_sigma[:, :3, :3] = g_sp
    g_sigma[:, :3, 3:] = g_pd
    g_sigma[:, 3:, 3:] = g_sdd

    # Sigma = L L^T; diagonal entries scale*exp(raw), off-diagonals tanh(raw).
    lam = cholesky_factor_batch(scene.cov_raw[rows], scene.spatial_scale,
                                scene.directional_scale)
    g_lam = np.einsum("nij,njk->nik", g_sigma + g_sigma.transpose(0, 2, 1), lam)
    idx6 = np.arange(6)
    g_raw = np.empty((len(rows), N_COV_RAW))
    g_raw[:, :6] = g_lam[:, idx6, idx6] * lam[:, idx6, idx6]
    off = lam[:, TRIL_I, TRIL_J]
    g_raw[:, 6:] = g_lam[:, TRIL_I, TRIL_J] * (1.0 - off * off)

    # View direction v = (mu_p - pos)/dist feeds the slicing delta and the SH.
    g_vx += g_d[:, 0]
    g_vy += g_d[:, 1]
    g_vz += g_d[:, 2]
    vdot = vx * g_vx + vy * g_vy + vz * g_vz
    g_mu_p = g_madj.copy()
    g_mu_p[:, 0] += (g_vx - vx * vdot) * inv_dist
    g_mu_p[:, 1] += (g_vy - vy * vdot) * inv_dist
    g_mu_p[:, 2] += (g_vz - vz * vdot) * inv_dist

    buf.mu_p[rows] = g_mu_p
    buf.mu_d[rows] = -g_d
    buf.cov_raw[rows] = g_raw
    buf.sh[rows] = g_sh
    buf.opacity_raw[rows] = g_opacity_raw


def render_backward(scene: Scene, camera: Camera, grad_image, group_mask=None,
                    config: RenderConfig = DEFAULT_CONFIG,
                    state: RenderState = None) -> GradientBuffer:
    """Loss partials for every Gaussian parameter, given d loss/d image.

    ``grad_image`` is (H, W, 4), matching the rendered RGBA layout. ``state``
    may carry the double-precision forward pass to reuse; otherwise the
    forward is recomputed here. Masked-out and culled Gaussians receive zero
    gradient.
    """
    buf = GradientBuffer.zeros(len(scene))
    cfg = replace(config, precision="f64")
    if state is None or state.config.precision != "f64":
        state = render_with_state(scene, camera, group_mask, cfg)
    grad_image = np.ascontiguousarray(grad_image, dtype=np.float64)
    if grad_image.shape != state.image.shape:
        raise InvalidParameterError(
            f"grad_image shape {grad_image.shape} does not match the "
            f"rendered image {state.image.shape}")
    splats = state.splats
    if len(splats) == 0 or not grad_image.any():
        return buf

    kernels = _kernels_for(cfg.backend)
    entries = state.entries
    entry_grads = np.zeros((len(entries.entry_splat), 9))
    kernels.composite_backward(
        np.ascontiguousarray(splats.means2d),
        np.ascontiguousarray(splats.conics),
        np.ascontiguousarray(splats.colors),
        np.ascontiguousarray(splats.alphas),
        entries.entry_splat, entries.tile_starts, entries.tiles_x,
        cfg.tile_size, np.ascontiguousarray(state.final_t, dtype=np.float64),
        state.last_contrib, grad_image, entry_grads, _resolve_threads(cfg))

    g_splat = np.zeros((len(splats), 9))
    np.add.at(g_splat, entries.entry_splat, entry_grads)
    _backward_rows(scene, camera, cfg, splats.gids, g_splat, buf)
    return buf


def polylr(step: int, total: int, base_lr: float) -> float:
    """Polynomial decay ``base_lr * (1 - step/total) ** 0.9``."""
    if total <= 0:
        raise InvalidParameterError(f"total must be positive, got {total}")
    if not 0 <= step <= total:
        raise InvalidParameterError(f"step {step} outside [0, {total}]")
    return base_lr * (1.0 - step / total) ** POLY_POWER


@dataclass
class OptimizerState:
    """Adam moment accumulators per parameter group, plus the lr schedule."""

    m: dict
    v: dict
    step: int
    total_steps: int
    base_lr: float
    lr_scale: dict = field(default_factory=lambda: dict(DEFAULT_LR_SCALE))
    skipped: int = 0

    def lr(self) -> float:
        """Learning rate the next step will use."""
        return polylr(self.step, self.total_steps, self.base_lr)


def init_optimizer(scene: Scene, total_steps: int, base_lr: float = 1e-3,
                   lr_scale: dict = None) -> OptimizerState:
    """Fresh zero-moment Adam state sized for ``scene``."""
    if total_steps <= 0:
        raise InvalidParameterError(f"total_steps must be positive, got {total_steps}")
    shapes = {name: getattr(scene, name).shape for name in PARAM_GROUPS}
    return OptimizerState(
        m={name: np.zeros(shape) for name, shape in shapes.items()},
        v={name: np.zeros(shape) for name, shape in shapes.items()},
        step=0, total_steps=total_steps, base_lr=base_lr,
        lr_scale=dict(DEFAULT_LR_SCALE if lr_scale is None else lr_scale))


def adam_step(state: OptimizerState, grads: GradientBuffer,
              scene: Scene) -> tuple[Scene, OptimizerState]:
    """One bias-corrected Adam update; returns the updated scene and state.

    A non-finite gradient anywhere skips the whole update (counted in
    ``state.skipped`` and logged) so one bad iteration cannot poison the
    moment estimates.
    """
    if not grads.all_finite():
        state.skipped += 1
        log.warning("step %d skipped: non-finite gradient", state.step)
        return scene, state
    lr_now = polylr(state.step, state.total_steps, state.base_lr)
    state.step += 1
    t = state.step
    bias1 = 1.0 - ADAM_BETA1 ** t
    bias2 = 1.0 - ADAM_BETA2 ** t
    updates = {}
    for name, g in grads.groups():
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * (g * g)
        lr_g = lr_now * state.lr_scale.get(name, 1.0)
        updates[name] = (getattr(scene, name)
                         - lr_g * (m / bias1) / (np.sqrt(v / bias2) + ADAM_EPS))
    return scene.with_params(**updates), state


def write_trace(history, path) -> None:
    """Write fine-tuning trace rows as CSV (iteration, lr, l1, ssim_loss, total)."""
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TRACE_FIELDS)
        writer.writeheader()
        writer.writerows(history)


def save_checkpoint(scene: Scene, state: OptimizerState, path) -> None:
    """Scene file at ``path`` plus an optimizer-state sidecar ``path + '.opt.npz'``."""
    save_scene(scene, path)
    arrays = {f"m_{name}": state.m[name] for name in PARAM_GROUPS}
    arrays.update({f"v_{name}": state.v[name] for name in PARAM_GROUPS})
    np.savez(
        str(path) + ".opt.npz",
        step=state.step, total_steps=state.total_steps,
        base_lr=state.base_lr, skipped=state.skipped,
        lr_scale_names=np.array(sorted(state.lr_scale), dtype=object),
        lr_scale_values=np.array([state.lr_scale[k] for k in sorted(state.lr_scale)]),
        **arrays)


def load_checkpoint(path) -> tuple[Scene, OptimizerState]:
    """Inverse of :func:`save_checkpoint`."""
    scene = load_scene(path)
    with np.load(str(path) + ".opt.npz", allow_pickle=True) as data:
        state = OptimizerState(
            m={name: data[f"m_{name}"] for name in PARAM_GROUPS},
            v={name: data[f"v_{name}"] for name in PARAM_GROUPS},
            step=int(data["step"]), total_steps=int(data["total_steps"]),
            base_lr=float(data["base_lr"]), skipped=int(data["skipped"]),
            lr_scale=dict(zip(data["lr_scale_names"].tolist(),
                              data["lr_scale_values"].tolist())))
    return scene, state


def finetune(scene: Scene, views, iters: int = 300, loss_cfg: LossConfig = None,
             config: RenderConfig = None, seed: int = 0, base_lr: float = 1e-3,
             lr_scale: dict = None, trace_path=None, checkpoint_path=None):
    """Optimize all per-Gaussian parameters against the given views.

    ``views`` is a nonempty sequence of (camera, target image) pairs; targets
    may be (H, W, 3) or (H, W, 4). Each iteration samples one view uniformly
    (seeded RNG), renders in double precision, backpropagates the photometric
    loss and applies one Adam step under polynomial lr decay. Returns
    ``(scene, history)`` where history rows carry iteration, lr, l1,
    ssim_loss and total. Single-threaded runs are bit-reproducible.
    """
    if len(views) == 0:
        raise InvalidParameterError("finetune needs at least one view")
    if iters < 0:
        raise InvalidParameterError(f"iters must be non-negative, got {iters}")
    if loss_cfg is None:
        loss_cfg = LossConfig()
    cfg = replace(config if config is not None else DEFAULT_CONFIG,
                  precision="f64")
    opt = init_optimizer(scene, total_steps=max(iters, 1), base_lr=base_lr,
                         lr_scale=lr_scale)
    rng = np.random.default_rng(seed)
    history = []
    for it in range(iters):
        cam, target = views[int(rng.integers(len(views)))]
        rstate = render_with_state(scene, cam, None, cfg)
        lr_now = opt.lr()
        total, l1, ssim_loss, grad = _loss_parts(rstate.image, target, loss_cfg)
        buf = render_backward(scene, cam, grad, config=cfg, state=rstate)
        scene, opt = adam_step(opt, buf, scene)
        history.append({"iteration": it, "lr": lr_now, "l1": l1,
                        "ssim_loss": ssim_loss, "total": total})
    if trace_path is not None:
        write_trace(history, trace_path)
    if checkpoint_path is not None:
        save_checkpoint(scene, opt, checkpoint_path)
    return scene, history
