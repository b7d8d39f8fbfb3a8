"""Tests for the 6D Gaussian primitive: factor construction, covariance
assembly, directional conditioning, and spherical-harmonic shading."""

import math

import numpy as np
import pytest

from splatct import core
from splatct.core import (
    Covariance6,
    DegenerateCovarianceError,
    DegenerateGeometryError,
    Gaussian6D,
    InvalidParameterError,
    build_covariance,
    build_covariance_batch,
    cholesky_factor,
    cholesky_factor_batch,
    conditioning_terms,
    eval_sh_color,
    slice_covariance,
    view_direction,
)

from oracles import conditional_gaussian_dense


def make_gaussian(rng, cov_scale=1.0):
    raw = rng.uniform(-1.5, 1.5, size=21) * cov_scale
    mu_d = rng.uniform(-1.0, 1.0, size=3)
    return Gaussian6D(
        mu_p=rng.uniform(-1.0, 1.0, size=3),
        mu_d=mu_d / np.linalg.norm(mu_d),
        cov_raw=raw,
        sh=rng.uniform(-0.5, 0.5, size=12),
        opacity_raw=rng.uniform(-2.0, 2.0),
    )


class TestCholeskyFactor:
    def test_zero_raw_gives_identity(self):
        fac = cholesky_factor(np.zeros(21))
        np.testing.assert_array_equal(fac, np.eye(6))

    def test_diagonal_log_parameterization(self):
        raw = np.zeros(21)
        raw[:6] = math.log(2.0)
        fac = cholesky_factor(raw)
        np.testing.assert_allclose(fac, 2.0 * np.eye(6), rtol=0, atol=1e-15)

    def test_off_diagonal_tanh_bound(self):
        raw = np.zeros(21)
        raw[6:] = 5.0
        fac = cholesky_factor(raw)
        off = fac[np.tril_indices(6, k=-1)]
        assert np.all(off == math.tanh(5.0))
        assert np.all(np.abs(off) < 1.0)
        raw[6:] = -400.0  # saturates in float but must stay bounded
        off = cholesky_factor(raw)[np.tril_indices(6, k=-1)]
        assert np.all(np.abs(off) <= 1.0)

    def test_row_major_lower_triangle_order(self):
        # raw[6] is the first strictly-lower entry, row-major: L[1, 0]
        raw = np.zeros(21)
        raw[6] = math.atanh(0.5)
        fac = cholesky_factor(raw)
        assert fac[1, 0] == pytest.approx(0.5, abs=1e-15)
        assert np.count_nonzero(fac - np.diag(np.diag(fac))) == 1

    def test_unit_scales_multiply_diagonal_blocks(self):
        raw = np.zeros(21)
        fac = cholesky_factor(raw, spatial_scale=np.array([2.0, 3.0, 4.0]),
                              directional_scale=0.5)
        np.testing.assert_allclose(np.diag(fac), [2.0, 3.0, 4.0, 0.5, 0.5, 0.5])

    def test_batch_matches_scalar(self):
        rng = np.random.default_rng(7)
        raws = rng.uniform(-2.0, 2.0, size=(50, 21))
        batch = cholesky_factor_batch(raws, spatial_scale=np.array([1.0, 2.0, 0.5]),
                                      directional_scale=1.5)
        for i in range(50):
            single = cholesky_factor(raws[i], spatial_scale=np.array([1.0, 2.0, 0.5]),
                                     directional_scale=1.5)
            np.testing.assert_array_equal(batch[i], single)


class TestBuildCovariance:
    def test_zero_raw_is_identity(self):
        cov = build_covariance(np.zeros(21))
        np.testing.assert_array_equal(cov.sigma, np.eye(6))

    def test_hand_multiplied_factor(self):
        # L = I except L[1,0] = 0.5, so Sigma = L L^T has Sigma[1,0] = 0.5
        # and Sigma[1,1] = 1.25, everything else identity.
        raw = np.zeros(21)
        raw[6] = math.atanh(0.5)
        cov = build_covariance(raw)
        expected = np.eye(6)
        expected[1, 0] = expected[0, 1] = 0.5
        expected[1, 1] = 1.25
        np.testing.assert_allclose(cov.sigma, expected, rtol=0, atol=1e-15)

    def test_symmetric_and_psd_over_random_draws(self):
        rng = np.random.default_rng(11)
        raws = rng.uniform(-3.0, 3.0, size=(10_000, 21))
        sigmas = build_covariance_batch(raws)
        asym = np.abs(sigmas - np.swapaxes(sigmas, 1, 2)).max()
        assert asym <= 1e-12
        eigs = np.linalg.eigvalsh(sigmas)
        assert eigs.min() >= -1e-8

    def test_block_views(self):
        rng = np.random.default_rng(3)
        cov = build_covariance(rng.uniform(-1.0, 1.0, size=21))
        np.testing.assert_array_equal(cov.sigma_pp, cov.sigma[:3, :3])
        np.testing.assert_array_equal(cov.sigma_dd, cov.sigma[3:, 3:])
        np.testing.assert_array_equal(cov.sigma_pd, cov.sigma[:3, 3:])

    def test_batch_matches_scalar(self):
        rng = np.random.default_rng(5)
        raws = rng.uniform(-2.0, 2.0, size=(20, 21))
        batch = build_covariance_batch(raws)
        for i in range(20):
            np.testing.assert_array_equal(batch[i], build_covariance(raws[i]).sigma)


class TestSliceCovariance:
    def test_decoupled_blocks_leave_position_untouched(self):
        # Sigma_pd = 0: conditioning must not move the mean or shrink Sigma_pp.
        rng = np.random.default_rng(13)
        raw = np.zeros(21)
        raw[:6] = rng.uniform(-1.0, 1.0, size=6)
        g = Gaussian6D(mu_p=np.array([1.0, 2.0, 3.0]), mu_d=np.array([0.0, 0.0, 1.0]),
                       cov_raw=raw, sh=np.zeros(12), opacity_raw=0.0)
        cov = build_covariance(raw)
        sliced = slice_covariance(g, cov, np.array([0.5, 0.5, 0.70710678]))
        np.testing.assert_array_equal(sliced.mu_p_prime, g.mu_p)
        np.testing.assert_allclose(sliced.sigma_pp_prime, cov.sigma_pp, atol=1e-15)

    def test_view_at_directional_mean_gives_unit_weight(self):
        rng = np.random.default_rng(17)
        g = make_gaussian(rng)
        cov = build_covariance(g.cov_raw)
        sliced = slice_covariance(g, cov, g.mu_d)
        assert sliced.w == pytest.approx(1.0, abs=0.0)
        np.testing.assert_array_equal(sliced.mu_p_prime, g.mu_p)

    def test_hand_worked_coupled_case(self):
        # Sigma = [[I, 0.5 I], [0.5 I, I]]: Schur complement 0.75 I, and a
        # view equal to mu_d keeps the mean in place with w = 1.
        sigma = np.eye(6)
        sigma[:3, 3:] = 0.5 * np.eye(3)
        sigma[3:, :3] = 0.5 * np.eye(3)
        cov = Covariance6(sigma=sigma)
        g = Gaussian6D(mu_p=np.zeros(3), mu_d=np.array([0.0, 0.0, 1.0]),
                       cov_raw=np.zeros(21), sh=np.zeros(12), opacity_raw=0.0)
        sliced = slice_covariance(g, cov, np.array([0.0, 0.0, 1.0]))
        np.testing.assert_allclose(sliced.sigma_pp_prime, 0.75 * np.eye(3), atol=1e-15)
        assert sliced.w == 1.0
        # Off-mean view: mean shifts by Sigma_pd Sigma_dd^-1 delta = 0.5 delta.
        v = np.array([0.1, 0.0, 0.99498744])
        sliced = slice_covariance(g, cov, v)
        np.testing.assert_allclose(sliced.mu_p_prime, 0.5 * (v - g.mu_d), atol=1e-12)

    def test_matches_dense_precision_oracle(self):
        rng = np.random.default_rng(19)
        worst = 0.0
        for _ in range(1000):
            g = make_gaussian(rng)
            cov = build_covariance(g.cov_raw)
            v = view_direction(g.mu_p, g.mu_p + rng.normal(size=3) * 2.0 + 4.0)
            sliced = slice_covariance(g, cov, v)
            mu_ref, cov_ref, w_ref = conditional_gaussian_dense(cov.sigma, g.mu_p, g.mu_d, v)
            scale = max(1.0, np.abs(mu_ref).max())
            worst = max(worst, np.abs(sliced.mu_p_prime - mu_ref).max() / scale)
            worst = max(worst, np.abs(sliced.sigma_pp_prime - cov_ref).max()
                        / max(1.0, np.abs(cov_ref).max()))
            worst = max(worst, abs(sliced.w - w_ref) / max(w_ref, 1e-30))
        assert worst < 1e-10

    def test_sliced_covariance_stays_psd(self):
        rng = np.random.default_rng(23)
        raws = rng.uniform(-3.0, 3.0, size=(10_000, 21))
        terms = conditioning_terms(build_covariance_batch(raws))
        ok = ~terms.degenerate
        assert ok.sum() > 9000
        eigs = np.linalg.eigvalsh(terms.sigma_prime[ok])
        assert eigs.min() >= -1e-8

    def test_weight_in_unit_interval_and_peaked_at_mean(self):
        rng = np.random.default_rng(29)
        for _ in range(500):
            g = make_gaussian(rng)
            cov = build_covariance(g.cov_raw)
            v = view_direction(np.zeros(3), rng.normal(size=3) + np.array([0, 0, 5.0]))
            sliced = slice_covariance(g, cov, v)
            assert 0.0 < sliced.w <= 1.0
            if not np.array_equal(v, g.mu_d):
                assert sliced.w < 1.0

    def test_raw_density_mode_scales_by_normalizer(self):
        rng = np.random.default_rng(31)
        g = make_gaussian(rng)
        cov = build_covariance(g.cov_raw)
        v = np.array([0.0, 0.0, 1.0])
        peak = slice_covariance(g, cov, v, mode="peak")
        raw = slice_covariance(g, cov, v, mode="raw")
        det_dd = np.linalg.det(cov.sigma_dd)
        expected = peak.w * (2.0 * math.pi) ** -1.5 / math.sqrt(det_dd)
        assert raw.w == pytest.approx(expected, rel=1e-12)

    def test_near_singular_direction_block_raises(self):
        sigma = np.eye(6)
        sigma[5, 5] = 1e-13
        cov = Covariance6(sigma=sigma)
        g = Gaussian6D(mu_p=np.zeros(3), mu_d=np.array([0.0, 0.0, 1.0]),
                       cov_raw=np.zeros(21), sh=np.zeros(12), opacity_raw=0.0)
        with pytest.raises(DegenerateCovarianceError):
            slice_covariance(g, cov, np.array([1.0, 0.0, 0.0]))

    def test_conditioning_terms_match_scalar_slice(self):
        rng = np.random.default_rng(37)
        raws = rng.uniform(-1.5, 1.5, size=(64, 21))
        mu_d = rng.uniform(-1.0, 1.0, size=(64, 3))
        sigmas = build_covariance_batch(raws)
        terms = conditioning_terms(sigmas)
        v = view_direction(np.zeros(3), np.array([0.3, -0.2, 4.0]))
        for i in range(64):
            if terms.degenerate[i]:
                continue
            g = Gaussian6D(mu_p=np.zeros(3), mu_d=mu_d[i], cov_raw=raws[i],
                           sh=np.zeros(12), opacity_raw=0.0)
            sliced = slice_covariance(g, Covariance6(sigma=sigmas[i]), v)
            delta = v - mu_d[i]
            mu_prime = terms.adjust[i] @ delta
            np.testing.assert_allclose(mu_prime, sliced.mu_p_prime, atol=1e-12)
            np.testing.assert_allclose(terms.sigma_prime[i], sliced.sigma_pp_prime,
                                       atol=1e-12)
            w = math.exp(-0.5 * float(delta @ terms.precision_dd[i] @ delta))
            assert w == pytest.approx(sliced.w, rel=1e-12)


class TestSphericalHarmonics:
    def test_degree_zero_is_view_independent(self):
        rng = np.random.default_rng(41)
        sh = np.zeros(12)
        sh[0] = (0.8 - 0.5) / core.SH_C0
        sh[1] = (0.8 - 0.5) / core.SH_C0
        sh[2] = (0.8 - 0.5) / core.SH_C0
        for _ in range(20):
            v = view_direction(np.zeros(3), rng.normal(size=3) + np.array([0, 0, 3.0]))
            np.testing.assert_allclose(eval_sh_color(sh, v), [0.8, 0.8, 0.8],
                                       rtol=0, atol=1e-12)

    def test_layout_is_basis_major(self):
        # sh[3:6] holds the Y_1^-1 coefficients for R, G, B; that basis term
        # carries -SH_C1 * v_y.
        sh = np.zeros(12)
        sh[3] = 1.0
        v = np.array([0.0, 1.0, 0.0])
        color = eval_sh_color(sh, v, clamp=False)
        np.testing.assert_allclose(color, [0.5 - core.SH_C1, 0.5, 0.5], atol=1e-15)

    def test_sign_convention_per_axis(self):
        sh = np.zeros(12)
        sh[3:12] = np.tile([1.0, 0.0, 0.0], 3)[:9]
        sh[3], sh[6], sh[9] = 1.0, 1.0, 1.0  # Y_1^{-1}, Y_1^{0}, Y_1^{1} on red
        sh[4:6] = 0.0
        sh[7:9] = 0.0
        sh[10:12] = 0.0
        c_y = eval_sh_color(sh, np.array([0.0, 1.0, 0.0]), clamp=False)[0]
        c_z = eval_sh_color(sh, np.array([0.0, 0.0, 1.0]), clamp=False)[0]
        c_x = eval_sh_color(sh, np.array([1.0, 0.0, 0.0]), clamp=False)[0]
        assert c_y == pytest.approx(0.5 - core.SH_C1)
        assert c_z == pytest.approx(0.5 + core.SH_C1)
        assert c_x == pytest.approx(0.5 - core.SH_C1)

    def test_antisymmetry_of_degree_one(self):
        # Degree-1 terms flip sign under v -> -v, so the sum of the two
        # unclamped colors is twice the DC response.
        rng = np.random.default_rng(43)
        sh = rng.uniform(-0.3, 0.3, size=12)
        v = view_direction(np.zeros(3), np.array([0.4, -0.3, 2.0]))
        plus = eval_sh_color(sh, v, clamp=False)
        minus = eval_sh_color(sh, -v, clamp=False)
        dc = core.SH_C0 * sh[:3] + 0.5
        np.testing.assert_allclose(plus + minus, 2.0 * dc, atol=1e-12)

    def test_output_clamped_to_unit_range(self):
        sh = np.zeros(12)
        sh[0] = 100.0
        sh[1] = -100.0
        color = eval_sh_color(sh, np.array([0.0, 0.0, 1.0]))
        assert color[0] == 1.0
        assert color[1] == 0.0


class TestViewDirection:
    def test_unit_norm_over_random_pairs(self):
        rng = np.random.default_rng(47)
        for _ in range(1000):
            a = rng.uniform(-10, 10, size=3)
            b = rng.uniform(-10, 10, size=3)
            if np.linalg.norm(a - b) < 1e-6:
                continue
            v = view_direction(a, b)
            assert abs(np.linalg.norm(v) - 1.0) < 1e-12

    def test_points_from_camera_to_gaussian(self):
        v = view_direction(np.array([0.0, 0.0, 5.0]), np.array([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(v, [0.0, 0.0, 1.0], atol=1e-15)

    def test_coincident_points_raise(self):
        p = np.array([1.0, 2.0, 3.0])
        with pytest.raises(DegenerateGeometryError):
            view_direction(p, p + 1e-15)


class TestGaussianValidation:
    def test_wrong_shapes_rejected(self):
        with pytest.raises(InvalidParameterError):
            Gaussian6D(mu_p=np.zeros(2), mu_d=np.zeros(3), cov_raw=np.zeros(21),
                       sh=np.zeros(12), opacity_raw=0.0)
        with pytest.raises(InvalidParameterError):
            Gaussian6D(mu_p=np.zeros(3), mu_d=np.zeros(3), cov_raw=np.zeros(20),
                       sh=np.zeros(12), opacity_raw=0.0)

    def test_non_finite_rejected(self):
        raw = np.zeros(21)
        raw[0] = np.nan
        with pytest.raises(InvalidParameterError):
            Gaussian6D(mu_p=np.zeros(3), mu_d=np.zeros(3), cov_raw=raw,
                       sh=np.zeros(12), opacity_raw=0.0)
        with pytest.raises(InvalidParameterError):
            Gaussian6D(mu_p=np.zeros(3), mu_d=np.zeros(3), cov_raw=np.zeros(21),
                       sh=np.zeros(12), opacity_raw=float("inf"))

    def test_arrays_are_frozen(self):
        g = Gaussian6D(mu_p=np.zeros(3), mu_d=np.zeros(3), cov_raw=np.zeros(21),
                       sh=np.zeros(12), opacity_raw=0.0)
        with pytest.raises(ValueError):
            g.mu_p[0] = 1.0


class TestSigmoidLogit:
    def test_round_trip(self):
        # Round trip is only well conditioned while 1 - sigmoid(x) keeps
        # relative precision, roughly |x| < 15.
        xs = np.linspace(-15, 15, 101)
        np.testing.assert_allclose(core.logit(core.sigmoid(xs)), xs, atol=1e-8)

    def test_extreme_values_stay_finite(self):
        assert core.sigmoid(1000.0) == 1.0
        assert core.sigmoid(-1000.0) == pytest.approx(0.0, abs=1e-300)
        assert np.isfinite(core.sigmoid(np.array([-1e4, 0.0, 1e4]))).all()
