"""Tests for scene instantiation, parameter-volume decoding, group filtering,
and the scene file format."""

import math

import numpy as np
import pytest

from splatct import priming
from splatct.core import SH_C0, InvalidParameterError, eval_sh_color, sigmoid
from splatct.priming import (
    EmptySceneError,
    ParamVolume,
    PrimingConfig,
    Scene,
    agp_initialize,
    decode_param_volume,
    encode_param_volume,
    filter_scene,
    instantiation_count,
    load_param_volume,
    save_param_volume,
    voxel_world_coords,
)
from splatct.sceneio import SceneFormatError, load_scene, save_scene
from splatct.volume import (
    CtVolume,
    InputVolume6,
    LabelVolume,
    VolumeFormatError,
    build_input_channels,
    load_preset,
)


def make_in6(labels_array, hu=250.0, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
    labels = LabelVolume(labels=labels_array, consolidated=True)
    shape = labels_array.shape
    raw = CtVolume(intensities=np.full(shape, hu), spacing=np.asarray(spacing),
                   origin=np.asarray(origin), direction=np.eye(3))
    norm = raw.with_intensities(np.zeros(shape))
    in6 = build_input_channels(norm, labels, load_preset("seen"), raw)
    return in6, labels


class TestVoxelWorldCoords:
    def test_origin_offset(self):
        out = voxel_world_coords((0, 0, 0), np.ones(3), np.array([10.0, 0, 0]),
                                 np.eye(3))
        np.testing.assert_array_equal(out, [10.0, 0.0, 0.0])

    def test_spacing_scales_index(self):
        out = voxel_world_coords((1, 0, 0), np.full(3, 1.5), np.zeros(3), np.eye(3))
        np.testing.assert_array_equal(out, [1.5, 0.0, 0.0])

    def test_rotated_direction(self):
        # 90 degree rotation about z: x_index axis maps to world +y
        rot = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        out = voxel_world_coords((2, 0, 0), np.ones(3), np.zeros(3), rot)
        np.testing.assert_allclose(out, [0.0, 2.0, 0.0], atol=1e-15)
        # hand-computed composite case
        out = voxel_world_coords((1, 2, 3), np.array([2.0, 1.0, 1.0]),
                                 np.array([5.0, 0.0, 0.0]), rot)
        np.testing.assert_allclose(out, [5.0 - 2.0, 2.0, 3.0], atol=1e-15)

    def test_batch_shape(self):
        idx = np.array([[0, 0, 0], [1, 1, 1]])
        out = voxel_world_coords(idx, np.ones(3), np.zeros(3), np.eye(3))
        assert out.shape == (2, 3)


class TestAgpInitialize:
    def test_single_liver_voxel(self):
        labels_array = np.zeros((2, 2, 2), dtype=np.uint8)
        labels_array[0, 0, 0] = 2
        in6, labels = make_in6(labels_array)
        scene = agp_initialize(in6, labels)
        assert len(scene) == 1
        assert scene.labels[0] == 2
        np.testing.assert_array_equal(scene.mu_p[0], [0.0, 0.0, 0.0])
        np.testing.assert_array_equal(scene.mu_d[0], [0.0, 0.0, 1.0])
        np.testing.assert_array_equal(scene.cov_raw[0], np.zeros(21))

    def test_count_equals_foreground(self):
        rng = np.random.default_rng(8)
        labels_array = rng.integers(0, 12, size=(5, 6, 7)).astype(np.uint8)
        in6, labels = make_in6(labels_array)
        scene = agp_initialize(in6, labels)
        assert len(scene) == int(np.count_nonzero(labels_array))
        np.testing.assert_array_equal(
            scene.group_counts,
            np.bincount(labels_array[labels_array > 0], minlength=12))

    def test_alpha_half_gives_zero_opacity_raw(self):
        labels_array = np.zeros((1, 1, 1), dtype=np.uint8)
        labels_array[0, 0, 0] = 2
        in6, labels = make_in6(labels_array)
        chans = in6.channels.copy()
        chans[5, 0, 0, 0] = 0.5
        in6 = InputVolume6(channels=chans, spacing=in6.spacing, origin=in6.origin,
                           direction=in6.direction)
        scene = agp_initialize(in6, labels)
        assert scene.opacity_raw[0] == pytest.approx(0.0, abs=1e-15)

    def test_dc_inversion_reproduces_tf_color(self):
        # shading an AGP gaussian head-on must return the voxel's TF color
        labels_array = np.full((1, 1, 1), 2, dtype=np.uint8)
        in6, labels = make_in6(labels_array, hu=250.0)
        scene = agp_initialize(in6, labels)
        color = eval_sh_color(scene.sh[0], np.array([0.0, 0.0, 1.0]))
        expected = in6.channels[2:5, 0, 0, 0]
        np.testing.assert_allclose(color, expected, atol=1.0 / 255.0)
        alpha = sigmoid(scene.opacity_raw[0])
        assert abs(alpha - in6.channels[5, 0, 0, 0]) < 1e-9

    def test_positions_inside_volume_bbox(self):
        rng = np.random.default_rng(9)
        labels_array = rng.integers(0, 12, size=(4, 4, 4)).astype(np.uint8)
        in6, labels = make_in6(labels_array, spacing=(0.8, 1.2, 2.0),
                               origin=(-3.0, 5.0, 1.0))
        scene = agp_initialize(in6, labels)
        lo = in6.origin - 1e-9
        hi = in6.origin + in6.spacing * np.array([3, 3, 3]) + 1e-9
        assert np.all(scene.mu_p >= lo) and np.all(scene.mu_p <= hi)

    def test_stride_subsamples(self):
        labels_array = np.full((4, 4, 4), 7, dtype=np.uint8)
        in6, labels = make_in6(labels_array)
        scene = agp_initialize(in6, labels, PrimingConfig(stride=2))
        assert len(scene) == 8
        # effective voxel pitch doubles, so the unit scale does too
        np.testing.assert_array_equal(scene.spatial_scale, [1.0, 1.0, 1.0])

    def test_empty_foreground_raises(self):
        labels_array = np.zeros((2, 2, 2), dtype=np.uint8)
        in6, labels = make_in6(labels_array)
        with pytest.raises(EmptySceneError):
            agp_initialize(in6, labels)

    def test_instantiation_counter_increments(self):
        labels_array = np.full((1, 1, 1), 5, dtype=np.uint8)
        in6, labels = make_in6(labels_array)
        before = instantiation_count()
        agp_initialize(in6, labels)
        assert instantiation_count() == before + 1


def make_half_res_setup(rng, dims=(4, 4, 4)):
    labels_array = rng.integers(0, 12, size=dims).astype(np.uint8)
    labels_array[0, 0, 0] = 7  # ensure some foreground on the half grid
    in6, labels = make_in6(labels_array, hu=300.0)
    half = tuple(d // 2 for d in dims)
    psi = ParamVolume(channels=rng.uniform(-0.5, 0.5,
                                           size=(37,) + half).astype(np.float32))
    return psi, in6, labels


class TestDecodeParamVolume:
    def test_zero_offsets_match_agp_except_opacity(self):
        rng = np.random.default_rng(10)
        labels_array = rng.integers(0, 12, size=(4, 6, 8)).astype(np.uint8)
        in6, labels = make_in6(labels_array, hu=200.0, spacing=(1.0, 1.5, 2.0))
        psi = ParamVolume(channels=np.zeros((37, 2, 3, 4)))
        decoded = decode_param_volume(psi, in6, labels)
        # reference: prime directly on the half-resolution grid
        half_labels = LabelVolume(labels=labels.labels[::2, ::2, ::2],
                                  consolidated=True)
        half_in6 = InputVolume6(channels=in6.channels[:, ::2, ::2, ::2],
                                spacing=in6.spacing * 2, origin=in6.origin,
                                direction=in6.direction)
        primed = agp_initialize(half_in6, half_labels)
        assert len(decoded) == len(primed)
        np.testing.assert_allclose(decoded.mu_p, primed.mu_p, atol=1e-12)
        np.testing.assert_array_equal(decoded.mu_d, primed.mu_d)
        np.testing.assert_array_equal(decoded.cov_raw, primed.cov_raw)
        np.testing.assert_allclose(decoded.sh, primed.sh, atol=1e-12)
        np.testing.assert_array_equal(decoded.labels, primed.labels)
        np.testing.assert_array_equal(decoded.spatial_scale, primed.spatial_scale)
        # opacity differs by design: base alpha vs logit(base alpha)
        base_alpha = half_in6.channels[5][half_labels.labels > 0]
        np.testing.assert_allclose(decoded.opacity_raw, base_alpha, atol=1e-12)

    def test_opacity_offset_saturates_sigmoid(self):
        labels_array = np.full((2, 2, 2), 2, dtype=np.uint8)
        in6, labels = make_in6(labels_array)
        chans = in6.channels.copy()
        chans[5] = 0.0
        in6 = InputVolume6(channels=chans, spacing=in6.spacing, origin=in6.origin,
                           direction=in6.direction)
        psi_data = np.zeros((37, 1, 1, 1))
        psi_data[15] = 10.0
        decoded = decode_param_volume(ParamVolume(channels=psi_data), in6, labels)
        assert sigmoid(decoded.opacity_raw[0]) == pytest.approx(1.0, abs=1e-4)

    def test_decode_encode_round_trip(self):
        # Offsets are recovered as (base + offset) - base, exact at the
        # float32 interchange precision of the parameter-volume format.
        rng = np.random.default_rng(11)
        psi, in6, labels = make_half_res_setup(rng, dims=(6, 6, 6))
        scene = decode_param_volume(psi, in6, labels)
        back = encode_param_volume(scene, in6, labels)
        half_labels = labels.labels[::2, ::2, ::2][:3, :3, :3]
        fg = half_labels > 0
        np.testing.assert_array_equal(back.channels[:, fg].astype(np.float32),
                                      psi.channels[:, fg].astype(np.float32))
        np.testing.assert_array_equal(back.channels[:, ~fg], 0.0)
        # copied-through fields are exact even in float64
        np.testing.assert_array_equal(back.channels[16:37, fg],
                                      psi.channels[16:37, fg])
        np.testing.assert_array_equal(back.channels[6:15, fg],
                                      psi.channels[6:15, fg])

    def test_dim_mismatch_rejected(self):
        rng = np.random.default_rng(12)
        labels_array = rng.integers(0, 12, size=(4, 4, 4)).astype(np.uint8)
        in6, labels = make_in6(labels_array)
        psi = ParamVolume(channels=np.zeros((37, 3, 2, 2)))
        with pytest.raises(VolumeFormatError, match="half-resolution"):
            decode_param_volume(psi, in6, labels)

    def test_channel_count_enforced(self):
        with pytest.raises(InvalidParameterError):
            ParamVolume(channels=np.zeros((36, 2, 2, 2)))

    def test_param_volume_file_round_trip(self, tmp_path):
        rng = np.random.default_rng(13)
        data = rng.normal(size=(37, 2, 3, 4)).astype(np.float32)
        psi = ParamVolume(channels=data)
        save_param_volume(psi, tmp_path / "psi")
        loaded = load_param_volume(tmp_path / "psi")
        np.testing.assert_array_equal(loaded.channels, psi.channels)

    def test_param_volume_payload_mismatch(self, tmp_path):
        (tmp_path / "bad.meta").write_text("channels=37\ndims=2 2 2\n")
        (tmp_path / "bad.raw").write_bytes(b"\x00" * 10)
        with pytest.raises(VolumeFormatError, match="bytes"):
            load_param_volume(tmp_path / "bad")


class TestFilterScene:
    @pytest.fixture()
    def scene(self):
        rng = np.random.default_rng(14)
        labels_array = rng.integers(0, 12, size=(5, 5, 5)).astype(np.uint8)
        in6, labels = make_in6(labels_array)
        return agp_initialize(in6, labels)

    def test_all_groups_is_identity(self, scene):
        out = filter_scene(scene, range(12))
        assert len(out) == len(scene)
        np.testing.assert_array_equal(out.mu_p, scene.mu_p)
        np.testing.assert_array_equal(out.labels, scene.labels)

    def test_empty_mask_gives_empty_scene(self, scene):
        out = filter_scene(scene, set())
        assert len(out) == 0

    def test_single_group_count_matches_linear_scan(self, scene):
        out = filter_scene(scene, {7})
        assert len(out) == int(sum(1 for lbl in scene.labels if lbl == 7))
        assert np.all(out.labels == 7)

    def test_disjoint_union_property(self, scene):
        a = filter_scene(scene, {1, 2, 3})
        b = filter_scene(scene, {7, 8})
        both = filter_scene(scene, {1, 2, 3, 7, 8})
        assert len(a) + len(b) == len(both)
        merged = np.sort(np.concatenate([a.opacity_raw, b.opacity_raw]))
        np.testing.assert_array_equal(merged, np.sort(both.opacity_raw))

    def test_filtering_never_instantiates(self, scene):
        before = instantiation_count()
        filter_scene(scene, {7})
        filter_scene(scene, set())
        filter_scene(scene, range(12))
        assert instantiation_count() == before

    def test_invalid_group_rejected(self, scene):
        with pytest.raises(InvalidParameterError):
            filter_scene(scene, {12})


class TestSceneFile:
    def make_scene(self, n, rng):
        # float32-representable values so the f32 records round-trip exactly
        f32 = lambda a: a.astype(np.float32).astype(np.float64)
        return Scene(
            mu_p=f32(rng.uniform(-50, 50, size=(n, 3))),
            mu_d=f32(rng.normal(size=(n, 3))),
            cov_raw=f32(rng.uniform(-2, 2, size=(n, 21))),
            sh=f32(rng.normal(size=(n, 12))),
            opacity_raw=f32(rng.normal(size=n)),
            labels=rng.integers(1, 12, size=n).astype(np.uint8),
            spacing=np.array([1.0, 1.5, 2.0]),
            origin=np.array([-3.0, 4.0, 5.0]),
            direction=np.eye(3),
            spatial_scale=np.array([0.5, 0.75, 1.0]),
            directional_scale=1.0,
        )

    def test_empty_scene_round_trip(self, tmp_path):
        scene = self.make_scene(0, np.random.default_rng(15))
        save_scene(scene, tmp_path / "empty.g6ds")
        loaded = load_scene(tmp_path / "empty.g6ds")
        assert len(loaded) == 0
        np.testing.assert_array_equal(loaded.spacing, scene.spacing)

    def test_single_gaussian_bit_exact(self, tmp_path):
        scene = self.make_scene(1, np.random.default_rng(16))
        save_scene(scene, tmp_path / "one.g6ds")
        loaded = load_scene(tmp_path / "one.g6ds")
        for name in ("mu_p", "mu_d", "cov_raw", "sh", "opacity_raw", "labels"):
            np.testing.assert_array_equal(getattr(loaded, name), getattr(scene, name))

    def test_10k_random_round_trip(self, tmp_path):
        scene = self.make_scene(10_000, np.random.default_rng(17))
        save_scene(scene, tmp_path / "big.g6ds")
        loaded = load_scene(tmp_path / "big.g6ds")
        for name in ("mu_p", "mu_d", "cov_raw", "sh", "opacity_raw", "labels",
                     "spacing", "origin", "direction", "spatial_scale"):
            np.testing.assert_array_equal(getattr(loaded, name), getattr(scene, name))
        assert loaded.directional_scale == scene.directional_scale

    def test_save_load_save_is_stable(self, tmp_path):
        # arbitrary float64 values: first save rounds to f32, after that the
        # cycle is exact
        rng = np.random.default_rng(18)
        scene = Scene(
            mu_p=rng.uniform(-50, 50, size=(5, 3)),
            mu_d=rng.normal(size=(5, 3)),
            cov_raw=rng.uniform(-2, 2, size=(5, 21)),
            sh=rng.normal(size=(5, 12)),
            opacity_raw=rng.normal(size=5),
            labels=np.full(5, 3, dtype=np.uint8),
            spacing=np.ones(3), origin=np.zeros(3), direction=np.eye(3),
            spatial_scale=np.full(3, 0.5),
        )
        save_scene(scene, tmp_path / "a.g6ds")
        first = load_scene(tmp_path / "a.g6ds")
        save_scene(first, tmp_path / "b.g6ds")
        assert (tmp_path / "a.g6ds").read_bytes() == (tmp_path / "b.g6ds").read_bytes()

    def test_bad_magic(self, tmp_path):
        scene = self.make_scene(1, np.random.default_rng(19))
        save_scene(scene, tmp_path / "x.g6ds")
        blob = bytearray((tmp_path / "x.g6ds").read_bytes())
        blob[:4] = b"NOPE"
        (tmp_path / "x.g6ds").write_bytes(bytes(blob))
        with pytest.raises(SceneFormatError, match="magic"):
            load_scene(tmp_path / "x.g6ds")

    def test_version_mismatch(self, tmp_path):
        scene = self.make_scene(1, np.random.default_rng(20))
        save_scene(scene, tmp_path / "x.g6ds")
        blob = bytearray((tmp_path / "x.g6ds").read_bytes())
        blob[4] = 99
        (tmp_path / "x.g6ds").write_bytes(bytes(blob))
        with pytest.raises(SceneFormatError, match="version"):
            load_scene(tmp_path / "x.g6ds")

    def test_truncated_payload(self, tmp_path):
        scene = self.make_scene(3, np.random.default_rng(21))
        save_scene(scene, tmp_path / "x.g6ds")
        blob = (tmp_path / "x.g6ds").read_bytes()
        (tmp_path / "x.g6ds").write_bytes(blob[:-10])
        with pytest.raises(SceneFormatError):
            load_scene(tmp_path / "x.g6ds")
