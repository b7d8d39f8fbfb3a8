"""6D Gaussian primitives: covariance assembly, view-direction slicing,
spherical-harmonic color and opacity modulation.

Each primitive is a Gaussian over joint (position, direction) space. Its 6x6
covariance is assembled from 21 raw parameters through a lower-triangular
factor L (diagonal entries in log-space, off-diagonals tanh-squashed), so
``Sigma = L @ L.T`` is positive semi-definite for any finite input.
Conditioning the 6D Gaussian on a concrete view direction yields the
view-dependent 3D spatial Gaussian (Schur complement of the directional
block) plus a directional opacity weight.

Everything here is a pure function of immutable inputs and safe to call
concurrently. The ``*_batch`` variants vectorize over a leading axis and are
the building blocks of the renderer's per-scene preparation stage.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Real spherical-harmonic constants, 3DGS basis convention:
#   c = SH_C0*sh0 - SH_C1*(v_y*sh1) + SH_C1*(v_z*sh2) - SH_C1*(v_x*sh3) + 0.5
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199

# Row-major lower-triangular (i > j) index pairs of a 6x6 matrix; fixes the
# meaning of cov_raw[6:21].
TRIL_I = np.array([1, 2, 2, 3, 3, 3, 4, 4, 4, 4, 5, 5, 5, 5, 5])
TRIL_J = np.array([0, 1, 0, 0, 1, 2, 0, 1, 2, 3, 0, 1, 2, 3, 4])

N_COV_RAW = 21
N_SH = 12
N_PARAMS = 40  # 3 position + 3 direction + 21 covariance + 12 SH + 1 opacity

# Condition-number ceiling above which the directional block is treated as
# numerically singular.
DD_CONDITION_LIMIT = 1e12


class InvalidParameterError(ValueError):
    """Raw Gaussian parameters are non-finite or malformed."""


class DegenerateCovarianceError(ArithmeticError):
    """Directional covariance block is numerically singular."""


class DegenerateGeometryError(ValueError):
    """Geometric construction is undefined (e.g. zero-length direction)."""


def sigmoid(x):
    """Numerically stable logistic function."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def logit(p):
    """Inverse of :func:`sigmoid`; input must lie strictly in (0, 1)."""
    p = np.asarray(p, dtype=np.float64)
    if np.any(p <= 0.0) or np.any(p >= 1.0):
        raise InvalidParameterError("logit argument must lie strictly in (0, 1)")
    out = np.log(p / (1.0 - p))
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class Gaussian6D:
    """One primitive of the scene representation.

    Attributes:
        mu_p: position mean, world millimeters, shape (3,).
        mu_d: direction mean, nominally unit length, shape (3,).
        cov_raw: 21 raw covariance parameters; [0:6] log-space diagonal of
            the Cholesky factor, [6:21] tanh-squashed off-diagonals in
            row-major lower-triangular order (``TRIL_I``/``TRIL_J``).
        sh: 12 spherical-harmonic coefficients, basis-major layout
            [Y00, Y1-1, Y10, Y11] x RGB.
        opacity_raw: pre-sigmoid opacity.
        label: consolidated anatomy group index in 0..11.
    """

    mu_p: np.ndarray
    mu_d: np.ndarray
    cov_raw: np.ndarray
    sh: np.ndarray
    opacity_raw: float
    label: int = 0

    def __post_init__(self):
        for name, size in (("mu_p", 3), ("mu_d", 3), ("cov_raw", N_COV_RAW), ("sh", N_SH)):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (size,):
                raise InvalidParameterError(f"{name} must have shape ({size},)")
            if not np.all(np.isfinite(arr)):
                raise InvalidParameterError(f"{name} contains non-finite values")
            arr = arr.copy()
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        if not np.isfinite(self.opacity_raw):
            raise InvalidParameterError("opacity_raw must be finite")
        if not 0 <= self.label <= 11:
            raise InvalidParameterError(f"label {self.label} outside 0..11")


@dataclass(frozen=True)
class Covariance6:
    """A 6x6 joint position/direction covariance with cached blocks."""

    sigma: np.ndarray

    def __post_init__(self):
        sigma = np.asarray(self.sigma, dtype=np.float64)
        if sigma.shape != (6, 6):
            raise InvalidParameterError("sigma must be 6x6")
        sigma = sigma.copy()
        sigma.flags.writeable = False
        object.__setattr__(self, "sigma", sigma)

    @property
    def sigma_pp(self) -> np.ndarray:
        return self.sigma[:3, :3]

    @property
    def sigma_pd(self) -> np.ndarray:
        return self.sigma[:3, 3:]

    @property
    def sigma_dd(self) -> np.ndarray:
        return self.sigma[3:, 3:]


@dataclass(frozen=True)
class SlicedGaussian:
    """View-conditioned spatial Gaussian: adjusted mean, effective 3D
    covariance, and the directional opacity modulation factor ``w``."""

    mu_p_prime: np.ndarray
    sigma_pp_prime: np.ndarray
    w: float


def cholesky_factor(cov_raw, spatial_scale=1.0, directional_scale=1.0) -> np.ndarray:
    """Lower-triangular factor L from 21 raw parameters.

    Diagonal entries are ``scale * exp(raw)`` (spatial scale for the first
    three rows, directional scale for the last three); off-diagonals are
    ``tanh(raw)``. ``spatial_scale`` may be a scalar or a per-axis 3-vector.
    """
    raw = np.asarray(cov_raw, dtype=np.float64)
    if raw.shape != (N_COV_RAW,):
        raise InvalidParameterError(f"cov_raw must have shape ({N_COV_RAW},)")
    if not np.all(np.isfinite(raw)):
        raise InvalidParameterError("cov_raw contains non-finite values")
    scale = np.empty(6)
    scale[:3] = spatial_scale
    scale[3:] = directional_scale
    lower = np.zeros((6, 6))
    lower[np.arange(6), np.arange(6)] = scale * np.exp(raw[:6])
    lower[TRIL_I, TRIL_J] = np.tanh(raw[6:])
    return lower


def build_covariance(cov_raw, spatial_scale=1.0, directional_scale=1.0) -> Covariance6:
    """Assemble ``Sigma = L @ L.T`` from raw parameters (PSD by construction).

    Delegates to the batch routine so scalar and batch paths agree bitwise.
    """
    raw = np.asarray(cov_raw, dtype=np.float64)
    sigma = build_covariance_batch(raw[None, :], spatial_scale, directional_scale)[0]
    return Covariance6(sigma=sigma)


def slice_covariance(g: Gaussian6D, cov: Covariance6, v, mode: str = "peak") -> SlicedGaussian:
    """Condition a 6D Gaussian on view direction ``v``.

    Returns the adjusted spatial mean ``mu_p + S_pd S_dd^-1 (v - mu_d)``, the
    Schur complement ``S_pp - S_pd S_dd^-1 S_dp``, and the opacity modulation
    ``w``. In the default ``"peak"`` mode ``w = exp(-0.5 m^2)`` with ``m^2``
    the Mahalanobis distance of ``v`` from ``mu_d``, so ``w`` is 1 at the peak
    and bounded by (0, 1]. ``"raw"`` mode multiplies in the Gaussian density
    normalization constant instead (may exceed 1).
    """
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v)
    if abs(norm - 1.0) > 1e-6:
        raise InvalidParameterError(f"view direction must be unit length, got |v|={norm}")
    sigma_dd = cov.sigma_dd
    if np.linalg.cond(sigma_dd) > DD_CONDITION_LIMIT:
        raise DegenerateCovarianceError("directional covariance block is numerically singular")
    delta = v - g.mu_d
    solve_dd = np.linalg.solve(sigma_dd, np.concatenate([delta[:, None], cov.sigma_pd.T], axis=1))
    mu_prime = g.mu_p + cov.sigma_pd @ solve_dd[:, 0]
    sigma_prime = cov.sigma_pp - cov.sigma_pd @ solve_dd[:, 1:]
    w = float(np.exp(-0.5 * delta @ solve_dd[:, 0]))
    if mode == "raw":
        det = np.linalg.det(sigma_dd)
        w *= float((2.0 * np.pi) ** -1.5 / np.sqrt(det))
    elif mode != "peak":
        raise ValueError(f"unknown opacity modulation mode {mode!r}")
    return SlicedGaussian(mu_p_prime=mu_prime, sigma_pp_prime=sigma_prime, w=w)


def eval_sh_color(sh, v, clamp: bool = True) -> np.ndarray:
    """View-dependent RGB from degree-0/1 spherical harmonics, clamped to [0, 1].

    Layout and signs follow the 3DGS convention; the +0.5 shift recenters the
    DC term so a zero coefficient renders mid-gray. ``clamp=False`` returns the
    raw affine response (used by the gradient path, which needs the pre-clamp
    value to gate the clamp's subgradient).
    """
    sh = np.asarray(sh, dtype=np.float64)
    if sh.shape != (N_SH,):
        raise InvalidParameterError(f"sh must have shape ({N_SH},)")
    if not np.all(np.isfinite(sh)):
        raise InvalidParameterError("sh contains non-finite values")
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v)
    if abs(norm - 1.0) > 1e-6:
        raise InvalidParameterError(f"view direction must be unit length, got |v|={norm}")
    coeff = sh.reshape(4, 3)
    rgb = (
        SH_C0 * coeff[0]
        - SH_C1 * v[1] * coeff[1]
        + SH_C1 * v[2] * coeff[2]
        - SH_C1 * v[0] * coeff[3]
        + 0.5
    )
    if clamp:
        return np.clip(rgb, 0.0, 1.0)
    return rgb


def view_direction(mu_p, cam_pos) -> np.ndarray:
    """Unit vector from the camera position toward the Gaussian."""
    mu_p = np.asarray(mu_p, dtype=np.float64)
    cam_pos = np.asarray(cam_pos, dtype=np.float64)
    diff = mu_p - cam_pos
    norm = np.linalg.norm(diff)
    if norm < 1e-12:
        raise DegenerateGeometryError("camera position coincides with the Gaussian mean")
    return diff / norm


# --- batch variants (renderer preparation stage) ---------------------------


def cholesky_factor_batch(cov_raw, spatial_scale=1.0, directional_scale=1.0) -> np.ndarray:
    """(N, 21) raw parameters -> (N, 6, 6) lower-triangular factors."""
    raw = np.asarray(cov_raw, dtype=np.float64)
    n = raw.shape[0]
    scale = np.empty(6)
    scale[:3] = spatial_scale
    scale[3:] = directional_scale
    lower = np.zeros((n, 6, 6))
    idx = np.arange(6)
    lower[:, idx, idx] = scale * np.exp(raw[:, :6])
    lower[:, TRIL_I, TRIL_J] = np.tanh(raw[:, 6:])
    return lower


def build_covariance_batch(cov_raw, spatial_scale=1.0, directional_scale=1.0) -> np.ndarray:
    """(N, 21) raw parameters -> (N, 6, 6) covariances."""
    lower = cholesky_factor_batch(cov_raw, spatial_scale, directional_scale)
    return np.einsum("nij,nkj->nik", lower, lower)


def inv3_batch(mats) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form adjugate inverse of a batch of 3x3 matrices.

    Returns (inverses, determinants). Written without LAPACK so each row's
    result is a pure elementwise function of that row (the renderer relies on
    row-subset invariance for its group-mask fast path).
    """
    m = np.asarray(mats, dtype=np.float64)
    a, b, c = m[:, 0, 0], m[:, 0, 1], m[:, 0, 2]
    d, e, f = m[:, 1, 0], m[:, 1, 1], m[:, 1, 2]
    g, h, i = m[:, 2, 0], m[:, 2, 1], m[:, 2, 2]
    co00 = e * i - f * h
    co01 = f * g - d * i
    co02 = d * h - e * g
    det = a * co00 + b * co01 + c * co02
    inv = np.empty_like(m)
    inv[:, 0, 0] = co00
    inv[:, 0, 1] = c * h - b * i
    inv[:, 0, 2] = b * f - c * e
    inv[:, 1, 0] = co01
    inv[:, 1, 1] = a * i - c * g
    inv[:, 1, 2] = c * d - a * f
    inv[:, 2, 0] = co02
    inv[:, 2, 1] = b * g - a * h
    inv[:, 2, 2] = a * e - b * d
    with np.errstate(divide="ignore", invalid="ignore"):
        inv /= det[:, None, None]
    return inv, det


@dataclass
class ConditioningTerms:
    """View-independent slicing terms cached per scene.

    ``adjust`` is ``S_pd S_dd^-1`` (feeds the adjusted mean), ``precision_dd``
    is ``S_dd^-1`` (feeds the opacity modulation), ``sigma_prime`` the Schur
    complement, and ``w_norm`` the per-Gaussian opacity normalization (1 in
    peak mode). ``degenerate`` flags rows whose directional block failed to
    invert; those are skipped and counted by the renderer.
    """

    adjust: np.ndarray
    precision_dd: np.ndarray
    sigma_prime: np.ndarray
    w_norm: np.ndarray
    degenerate: np.ndarray
    sigma: np.ndarray = field(repr=False, default=None)


def conditioning_terms(sigma, w_mode: str = "peak") -> ConditioningTerms:
    """Precompute view-independent slicing terms for (N, 6, 6) covariances."""
    sigma = np.asarray(sigma, dtype=np.float64)
    sigma_pp = sigma[:, :3, :3]
    sigma_pd = sigma[:, :3, 3:]
    sigma_dd = sigma[:, 3:, 3:]
    precision, det = inv3_batch(sigma_dd)
    trace = np.einsum("nii->n", sigma_dd)
    degenerate = ~np.isfinite(det) | (det <= 1e-30 * np.maximum(trace, 1e-30) ** 3)
    precision[degenerate] = 0.0
    adjust = np.einsum("nij,njk->nik", sigma_pd, precision)
    sigma_prime = sigma_pp - np.einsum("nij,nkj->nik", adjust, sigma_pd)
    if w_mode == "peak":
        w_norm = np.ones(sigma.shape[0])
    elif w_mode == "raw":
        with np.errstate(invalid="ignore"):
            w_norm = (2.0 * np.pi) ** -1.5 / np.sqrt(det)
        w_norm[degenerate] = 0.0
    else:
        raise ValueError(f"unknown opacity modulation mode {w_mode!r}")
    return ConditioningTerms(
        adjust=adjust,
        precision_dd=precision,
        sigma_prime=sigma_prime,
        w_norm=w_norm,
        degenerate=degenerate,
        sigma=sigma,
    )
