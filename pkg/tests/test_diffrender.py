"""Differentiable renderer tests: loss, MS-SSIM, analytic gradients, Adam.

Gradients are pinned against central finite differences of the actual forward
renderer. The forward is a truncated compositor (hard cutoffs at the 3-sigma
response boundary and the transmittance floor), so its loss surface has
measure-zero kinks; the scene seeds below keep every probed coordinate away
from those kinks at the probe step sizes, where the analytic value is the
exact derivative of the smooth piece.
"""

import math
import os

import numpy as np
import pytest

import oracles
from splatct import diffrender
from splatct.camera import make_camera
from splatct.core import InvalidParameterError
from splatct.diffrender import (
    GradientBuffer,
    LossConfig,
    OptimizerState,
    adam_step,
    finetune,
    init_optimizer,
    load_checkpoint,
    loss,
    ms_ssim,
    polylr,
    render_backward,
    save_checkpoint,
)
from splatct.priming import Scene
from splatct.raster import RenderConfig, render, render_with_state

F64 = RenderConfig(precision="f64", threads=1)


def make_scene(seed, n, box=6.0, sh_scale=0.25, opacity_lo=-0.5, opacity_hi=1.5,
               spread_depth=True):
    rng = np.random.default_rng(seed)
    mu_p = rng.uniform(-box, box, (n, 3))
    if spread_depth:
        # Distinct depths so finite-difference probes cannot flip sort order.
        mu_p[:, 2] = np.linspace(-4.0, 4.0, n) + rng.uniform(-0.3, 0.3, n)
    mu_d = rng.standard_normal((n, 3))
    mu_d /= np.linalg.norm(mu_d, axis=1, keepdims=True)
    cov_raw = np.zeros((n, 21))
    cov_raw[:, :6] = rng.uniform(-0.2, 0.6, (n, 6))
    cov_raw[:, 6:] = rng.normal(0.0, 0.3, (n, 15))
    return Scene(
        mu_p=mu_p, mu_d=mu_d, cov_raw=cov_raw,
        sh=rng.normal(0.0, sh_scale, (n, 12)),
        opacity_raw=rng.uniform(opacity_lo, opacity_hi, n),
        labels=rng.integers(1, 12, n),
        spacing=np.ones(3), origin=np.zeros(3), direction=np.eye(3),
        spatial_scale=np.full(3, 2.5), directional_scale=1.0)


def front_camera(width=24, height=24, fov=0.6, distance=30.0):
    return make_camera(position=(0.0, 0.0, -distance), target=(0.0, 0.0, 0.0),
                       up=(0.0, 1.0, 0.0), fov_y=fov, width=width, height=height)


class TestLossConfig:
    def test_defaults_normalized(self):
        cfg = LossConfig()
        assert cfg.lambda_l1 == 0.8
        assert cfg.lambda_ssim == 0.2
        assert math.isclose(sum(cfg.ms_ssim_weights), 1.0, rel_tol=0, abs_tol=1e-9)

    def test_negative_weight_rejected(self):
        with pytest.raises(InvalidParameterError):
            LossConfig(lambda_l1=-0.1)

    def test_both_zero_rejected(self):
        with pytest.raises(InvalidParameterError):
            LossConfig(lambda_l1=0.0, lambda_ssim=0.0)

    def test_scale_weight_count_mismatch_rejected(self):
        with pytest.raises(InvalidParameterError):
            LossConfig(ms_ssim_scales=3, ms_ssim_weights=(0.5, 0.5))

    def test_nonpositive_ms_weight_rejected(self):
        with pytest.raises(InvalidParameterError):
            LossConfig(ms_ssim_scales=2, ms_ssim_weights=(1.0, 0.0))


class TestLoss:
    def test_identical_images_zero(self):
        img = np.random.default_rng(0).random((32, 32, 4))
        value, grad = loss(img, img)
        assert value == 0.0
        assert not grad.any()

    def test_constant_offset_l1_term(self):
        img = np.random.default_rng(1).random((24, 24, 4)) * 0.5
        cfg = LossConfig(lambda_l1=1.0, lambda_ssim=0.0,
                         ms_ssim_scales=1, ms_ssim_weights=(1.0,))
        value, _ = loss(img + 0.1, img, cfg)
        assert value == pytest.approx(0.1, rel=1e-12)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(InvalidParameterError):
            loss(np.zeros((16, 16, 4)), np.zeros((16, 17, 4)))

    def test_alpha_channel_ignored(self):
        rng = np.random.default_rng(2)
        a = rng.random((24, 24, 4))
        b = a.copy()
        b[:, :, 3] = rng.random((24, 24))
        value, grad = loss(a, b)
        assert value == 0.0
        assert not grad[:, :, 3].any()

    def test_gradient_matches_finite_differences(self):
        # Random 16x16 pairs, central differences at eps=1e-5, rel 1e-4.
        rng = np.random.default_rng(5)
        pred = rng.random((16, 16, 4))
        gt = rng.random((16, 16, 4))
        cfg = LossConfig()
        _, grad = loss(pred, gt, cfg)
        fd = oracles.central_difference(
            lambda x: loss(x.reshape(pred.shape), gt, cfg)[0],
            pred.ravel(), eps=1e-5).reshape(pred.shape)
        err = np.abs(grad - fd)
        rel = err / np.maximum(np.abs(fd), 1e-8)
        assert np.all((rel < 1e-4) | (err < 1e-10))


class TestMsSsim:
    def test_identity_exact(self):
        img = np.random.default_rng(0).random((64, 64, 3))
        assert ms_ssim(img, img) == 1.0

    def test_symmetric(self):
        rng = np.random.default_rng(1)
        a = rng.random((48, 48))
        b = np.clip(a + 0.1 * rng.standard_normal((48, 48)), 0.0, 1.0)
        assert abs(ms_ssim(a, b, 3, (0.2, 0.3, 0.5))
                   - ms_ssim(b, a, 3, (0.2, 0.3, 0.5))) < 1e-12

    def test_range(self):
        rng = np.random.default_rng(2)
        for _ in range(5):
            a = rng.random((32, 32))
            b = rng.random((32, 32))
            v = ms_ssim(a, b)
            assert -1.0 <= v <= 1.0

    def test_checkerboard_matches_reference(self):
        # Inverted checkerboards are anti-correlated; the single-scale
        # fallback (64 < 2^4 * 11) must reproduce the per-window reference.
        ck = (np.indices((64, 64)).sum(axis=0) % 2).astype(np.float64)
        value = ms_ssim(ck, 1.0 - ck)
        assert value < 0.0
        assert value == pytest.approx(oracles.ssim_reference(ck, 1.0 - ck), abs=1e-9)

    def test_multiscale_matches_reference(self):
        rng = np.random.default_rng(3)
        a = rng.random((30, 34))
        b = np.clip(a + 0.08 * rng.standard_normal((30, 34)), 0.0, 1.0)
        weights = (0.4, 0.6)
        assert ms_ssim(a, b, 2, weights) == pytest.approx(
            oracles.ms_ssim_reference(a, b, 2, weights), abs=1e-9)

    def test_small_image_falls_back_to_single_scale(self):
        rng = np.random.default_rng(4)
        a = rng.random((64, 64))
        b = rng.random((64, 64))
        assert ms_ssim(a, b, 5) == pytest.approx(
            oracles.ssim_reference(a, b), abs=1e-12)

    def test_alpha_channel_ignored(self):
        rng = np.random.default_rng(5)
        a = rng.random((32, 32, 4))
        b = a.copy()
        b[:, :, 3] = 0.0
        assert ms_ssim(a, b) == 1.0


class TestRenderBackwardTrivial:
    def test_zero_gradient_image(self):
        scene = make_scene(11, 5)
        cam = front_camera()
        buf = render_backward(scene, cam, np.zeros((24, 24, 4)), config=F64)
        for _, arr in buf.groups():
            assert not arr.any()

    def test_culled_gaussian_zero_block(self):
        scene = make_scene(7, 4)
        mu = scene.mu_p.copy()
        mu[2] = (0.0, 0.0, -500.0)  # far behind the camera
        scene = scene.with_params(mu_p=mu)
        cam = front_camera()
        state = render_with_state(scene, cam, None, F64)
        assert 2 not in state.splats.gids
        grad_image = np.random.default_rng(1).standard_normal((24, 24, 4))
        buf = render_backward(scene, cam, grad_image, config=F64, state=state)
        for _, arr in buf.groups():
            assert not arr[2].any()

    def test_masked_out_rows_zero(self):
        scene = make_scene(13, 8)
        labels = scene.labels.copy()
        labels[:4] = 3
        labels[4:] = 5
        scene = scene.with_params(labels=labels)
        cam = front_camera()
        grad_image = np.random.default_rng(2).standard_normal((24, 24, 4))
        buf = render_backward(scene, cam, grad_image, group_mask=[3], config=F64)
        for _, arr in buf.groups():
            assert not arr[4:].any()

    def test_grad_shape_mismatch_rejected(self):
        scene = make_scene(11, 5)
        with pytest.raises(InvalidParameterError):
            render_backward(scene, front_camera(), np.zeros((10, 10, 4)), config=F64)


def finite_difference_check(scene, cam, config, eps=1e-4, seed=99,
                            group_mask=None):
    """Analytic gradients of sum(render * W) vs central differences."""
    state = render_with_state(scene, cam, group_mask, config)
    weights = np.random.default_rng(seed).standard_normal(state.image.shape)
    buf = render_backward(scene, cam, weights, group_mask=group_mask,
                          config=config, state=state)

    def objective(s):
        return float(np.sum(render(s, cam, group_mask, config) * weights))

    for name, analytic in buf.groups():
        base = getattr(scene, name)
        flat = base.reshape(-1)
        fd = np.zeros(flat.size)
        for i in range(flat.size):
            hi = flat.copy()
            hi[i] += eps
            lo = flat.copy()
            lo[i] -= eps
            fd[i] = (objective(scene.with_params(**{name: hi.reshape(base.shape)}))
                     - objective(scene.with_params(**{name: lo.reshape(base.shape)}))
                     ) / (2.0 * eps)
        err = np.abs(analytic.reshape(-1) - fd)
        rel = err / np.maximum(np.abs(fd), 1e-8)
        bad = ~((rel < 1e-3) | (err < 1e-8))
        assert not bad.any(), (
            f"{name}: {int(bad.sum())} coordinates off, worst rel "
            f"{rel[bad].max():.3e}")


class TestRenderBackwardGradcheck:
    def test_every_parameter_five_gaussian_scene(self):
        # The module's primary gradient pin: all 200 parameters of a
        # 5-Gaussian scene on a 24x24 viewport, eps 1e-4, rel < 1e-3.
        finite_difference_check(make_scene(11, 5), front_camera(), F64)

    def test_overlapping_splats_with_caps_and_clips(self):
        # Saturated opacities exercise the alpha cap gate, hot SH
        # coefficients the color clamp gate, overlap the transmittance chain.
        scene = make_scene(0, 8, box=2.0, sh_scale=0.8,
                           opacity_lo=1.0, opacity_hi=8.0)
        mu_d = scene.mu_d.copy()
        mu_d[:3] = (0.0, 0.0, 1.0)  # aligned with the view -> w near 1
        opacity = scene.opacity_raw.copy()
        opacity[:3] = 6.0
        scene = scene.with_params(mu_d=mu_d, opacity_raw=opacity)
        state = render_with_state(scene, front_camera(), None, F64)
        assert np.any(state.splats.alphas == F64.alpha_max)
        finite_difference_check(scene, front_camera(), F64)

    def test_raw_w_mode(self):
        cfg = RenderConfig(precision="f64", threads=1, w_mode="raw")
        finite_difference_check(make_scene(0, 8, box=2.0, opacity_lo=1.0,
                                           opacity_hi=2.0), front_camera(), cfg)

    def test_group_masked(self):
        scene = make_scene(6, 10, box=2.0)
        finite_difference_check(scene, front_camera(), F64,
                                group_mask=list(range(1, 6)))


class TestPolyLr:
    def test_step_zero_is_base(self):
        assert polylr(0, 300, 1e-3) == 1e-3

    def test_final_step_is_zero(self):
        assert polylr(300, 300, 1e-3) == 0.0

    def test_halfway_value(self):
        assert polylr(150, 300, 1e-3) == pytest.approx(5.358867312681466e-4,
                                                       rel=1e-12)

    def test_total_zero_rejected(self):
        with pytest.raises(InvalidParameterError):
            polylr(0, 0, 1e-3)

    def test_step_outside_range_rejected(self):
        with pytest.raises(InvalidParameterError):
            polylr(301, 300, 1e-3)


class TestAdamStep:
    def tiny_scene(self, n=3):
        return make_scene(0, n, spread_depth=False)

    def test_first_step_bias_corrected(self):
        scene = self.tiny_scene()
        opt = init_optimizer(scene, total_steps=10, base_lr=1e-3, lr_scale={})
        grads = GradientBuffer.zeros(len(scene))
        grads.opacity_raw[:] = 0.37
        updated, opt = adam_step(opt, grads, scene)
        # First step: m_hat = g, v_hat = g^2, so the move is
        # -lr * g / (|g| + eps), nearly -lr * sign(g).
        g = 0.37
        expected = scene.opacity_raw[0] - 1e-3 * g / (math.sqrt(g * g) + 1e-8)
        assert updated.opacity_raw[0] == pytest.approx(expected, rel=1e-12)
        assert opt.step == 1

    def test_two_steps_match_scalar_reference(self):
        scene = self.tiny_scene()
        opt = init_optimizer(scene, total_steps=10, base_lr=1e-3, lr_scale={})
        grads = GradientBuffer.zeros(len(scene))
        grads.sh[:] = -0.21
        s1, opt = adam_step(opt, grads, scene)
        s2, opt = adam_step(opt, grads, s1)
        lrs = [polylr(0, 10, 1e-3), polylr(1, 10, 1e-3)]
        ref = oracles.adam_reference(scene.sh[0, 0], [-0.21, -0.21], lrs)
        assert abs(s1.sh[0, 0] - ref[0]) < 1e-12
        assert abs(s2.sh[0, 0] - ref[1]) < 1e-12

    def test_zero_gradient_leaves_parameters(self):
        scene = self.tiny_scene()
        opt = init_optimizer(scene, total_steps=10)
        opt.m["sh"][:] = 0.5
        opt.v["sh"][:] = 0.25
        _, opt2 = adam_step(opt, GradientBuffer.zeros(len(scene)), scene)
        # Moments decay toward zero even when the gradient vanishes.
        assert np.all(opt2.m["sh"] == 0.5 * diffrender.ADAM_BETA1)
        assert np.all(opt2.v["sh"] == 0.25 * diffrender.ADAM_BETA2)
        zero_opt = init_optimizer(scene, total_steps=10)
        unchanged, _ = adam_step(zero_opt, GradientBuffer.zeros(len(scene)), scene)
        for name, _ in GradientBuffer.zeros(len(scene)).groups():
            np.testing.assert_array_equal(getattr(unchanged, name),
                                          getattr(scene, name))

    def test_first_step_opposes_gradient_sign(self):
        scene = self.tiny_scene()
        opt = init_optimizer(scene, total_steps=10, lr_scale={})
        grads = GradientBuffer.zeros(len(scene))
        grads.mu_p[:] = np.array([1.0, -2.0, 0.5])
        updated, _ = adam_step(opt, grads, scene)
        move = updated.mu_p - scene.mu_p
        assert np.all(np.sign(move) == -np.sign(grads.mu_p))

    def test_position_lr_multiplier(self):
        scene = self.tiny_scene()
        opt = init_optimizer(scene, total_steps=10, base_lr=1e-3)
        grads = GradientBuffer.zeros(len(scene))
        grads.mu_p[:] = 4.0
        grads.mu_d[:] = 4.0
        updated, _ = adam_step(opt, grads, scene)
        move_p = np.abs(updated.mu_p - scene.mu_p)
        move_d = np.abs(updated.mu_d - scene.mu_d)
        np.testing.assert_allclose(move_p, 0.1 * move_d, rtol=1e-9)

    def test_non_finite_gradient_skips_and_counts(self):
        scene = self.tiny_scene()
        opt = init_optimizer(scene, total_steps=10)
        grads = GradientBuffer.zeros(len(scene))
        grads.cov_raw[1, 3] = np.inf
        returned, opt = adam_step(opt, grads, scene)
        assert returned is scene
        assert opt.step == 0
        assert opt.skipped == 1
        assert not opt.m["cov_raw"].any()


class TestFinetune:
    def setup_method(self):
        self.cam = front_camera(width=48, height=48, fov=0.7, distance=25.0)
        truth = make_scene(2, 12, box=4.0, sh_scale=0.3,
                           opacity_lo=0.5, opacity_hi=2.0, spread_depth=False)
        self.gt = render(truth, self.cam, None, F64)
        rng = np.random.default_rng(3)
        self.start = truth.with_params(sh=truth.sh + rng.normal(0, 0.3, truth.sh.shape))

    def test_zero_iterations_returns_scene_unchanged(self):
        tuned, history = finetune(self.start, [(self.cam, self.gt)], iters=0,
                                  config=F64)
        assert tuned is self.start
        assert history == []

    def test_single_view_l1_improves(self):
        _, history = finetune(self.start, [(self.cam, self.gt)], iters=40,
                              config=F64, seed=0)
        assert len(history) == 40
        assert history[-1]["l1"] < history[0]["l1"]

    def test_fixed_seed_bit_reproducible(self):
        views = [(self.cam, self.gt),
                 (front_camera(48, 48, 0.7, 28.0), self.gt)]
        a, ha = finetune(self.start, views, iters=8, config=F64, seed=7)
        b, hb = finetune(self.start, views, iters=8, config=F64, seed=7)
        assert ha == hb
        for name in diffrender.PARAM_GROUPS:
            np.testing.assert_array_equal(getattr(a, name), getattr(b, name))

    def test_lr_follows_schedule(self):
        _, history = finetune(self.start, [(self.cam, self.gt)], iters=4,
                              config=F64, base_lr=2e-3)
        for it, row in enumerate(history):
            assert row["lr"] == pytest.approx(polylr(it, 4, 2e-3), rel=1e-12)

    def test_no_views_rejected(self):
        with pytest.raises(InvalidParameterError):
            finetune(self.start, [], iters=1)

    def test_trace_csv_and_checkpoint(self, tmp_path):
        trace = tmp_path / "trace.csv"
        ckpt = tmp_path / "scene.g6ds"
        tuned, history = finetune(self.start, [(self.cam, self.gt)], iters=3,
                                  config=F64, trace_path=trace,
                                  checkpoint_path=ckpt)
        lines = trace.read_text().strip().splitlines()
        assert lines[0] == "iteration,lr,l1,ssim_loss,total"
        assert len(lines) == 4
        scene, opt = load_checkpoint(ckpt)
        assert opt.step == 3
        assert len(scene) == len(tuned)
        # The scene file stores parameters at f32 precision.
        np.testing.assert_array_equal(
            scene.mu_p, tuned.mu_p.astype(np.float32).astype(np.float64))
        np.testing.assert_array_equal(opt.m["sh"],
                                      np.asarray(opt.m["sh"], dtype=np.float64))
