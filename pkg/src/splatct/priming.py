"""Scene instantiation: anatomy-guided priming from the 6-channel volume and
decoding of 37-channel parameter volumes into Gaussian scenes.

A Scene is a structure-of-arrays over Gaussians (float64 in memory) plus the
source volume's placement and the covariance unit scales. Group filtering is
an O(n) index subset and never re-instantiates; an instantiation counter
exposes that guarantee to tests.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .core import N_COV_RAW, N_SH, SH_C0, Gaussian6D, InvalidParameterError, logit
from .volume import (
    InputVolume6,
    LabelVolume,
    N_GROUPS,
    VolumeFormatError,
    _as_array,
)

logger = logging.getLogger(__name__)

DEFAULT_MU_D = np.array([0.0, 0.0, 1.0])
ALPHA_FLOOR = 1e-4

# Bumped on every scene instantiation (priming or decoding). Group filtering
# must leave it untouched; tests assert that.
_instantiation_count = 0


def instantiation_count() -> int:
    return _instantiation_count


def _count_instantiation() -> None:
    global _instantiation_count
    _instantiation_count += 1


class EmptySceneError(ValueError):
    """No foreground voxels to instantiate Gaussians from."""


@dataclass(frozen=True, eq=False)
class Scene:
    """Immutable structure-of-arrays over 6D Gaussians.

    Identity-based equality keeps instances usable as cache keys for
    per-scene prepared state.
    """

    mu_p: np.ndarray         # (N, 3) world mm
    mu_d: np.ndarray         # (N, 3)
    cov_raw: np.ndarray      # (N, 21)
    sh: np.ndarray           # (N, 12)
    opacity_raw: np.ndarray  # (N,)
    labels: np.ndarray       # (N,) uint8, 1-11
    spacing: np.ndarray      # (3,) source voxel spacing, mm
    origin: np.ndarray       # (3,)
    direction: np.ndarray    # (3, 3)
    spatial_scale: np.ndarray     # (3,) Cholesky diagonal unit scale, mm
    directional_scale: float = 1.0

    def __post_init__(self):
        n = len(self.mu_p)
        fields = {
            "mu_p": (n, 3), "mu_d": (n, 3), "cov_raw": (n, N_COV_RAW),
            "sh": (n, N_SH), "opacity_raw": (n,),
        }
        for name, shape in fields.items():
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise InvalidParameterError(
                    f"{name} must have shape {shape}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise InvalidParameterError(f"{name} contains non-finite values")
            object.__setattr__(self, name, arr)
        labels = np.ascontiguousarray(self.labels)
        if labels.shape != (n,):
            raise InvalidParameterError(f"labels must have shape ({n},)")
        if n and (labels.min() < 1 or labels.max() >= N_GROUPS):
            raise InvalidParameterError(
                f"scene labels must lie in [1, {N_GROUPS - 1}]")
        object.__setattr__(self, "labels", labels.astype(np.uint8))
        object.__setattr__(self, "spacing", _as_array(self.spacing, (3,), "spacing"))
        object.__setattr__(self, "origin", _as_array(self.origin, (3,), "origin"))
        object.__setattr__(self, "direction",
                           _as_array(self.direction, (3, 3), "direction"))
        object.__setattr__(self, "spatial_scale",
                           _as_array(self.spatial_scale, (3,), "spatial_scale"))
        object.__setattr__(self, "directional_scale", float(self.directional_scale))

    def __len__(self) -> int:
        return self.mu_p.shape[0]

    @property
    def group_counts(self) -> np.ndarray:
        """Gaussians per consolidated group, length 12 (index 0 always 0)."""
        return np.bincount(self.labels, minlength=N_GROUPS)

    def gaussian(self, i: int) -> Gaussian6D:
        return Gaussian6D(mu_p=self.mu_p[i], mu_d=self.mu_d[i],
                          cov_raw=self.cov_raw[i], sh=self.sh[i],
                          opacity_raw=float(self.opacity_raw[i]),
                          label=int(self.labels[i]))

    def take(self, indices) -> "Scene":
        """Subset by index array, preserving order and metadata."""
        return replace(self, mu_p=self.mu_p[indices], mu_d=self.mu_d[indices],
                       cov_raw=self.cov_raw[indices], sh=self.sh[indices],
                       opacity_raw=self.opacity_raw[indices],
                       labels=self.labels[indices])

    def with_params(self, **arrays) -> "Scene":
        """Copy with some parameter arrays replaced (optimizer updates)."""
        return replace(self, **arrays)


def voxel_world_coords(index, spacing, origin, direction) -> np.ndarray:
    """World position of voxel ``index`` = (i, j, k) in (x, y, z) order.

    Accepts a single index triple or an (N, 3) array.
    """
    index = np.asarray(index, dtype=np.float64)
    spacing = np.asarray(spacing, dtype=np.float64)
    origin = np.asarray(origin, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    return origin + (index * spacing) @ direction.T


@dataclass(frozen=True)
class PrimingConfig:
    stride: int = 1           # voxel subsampling along each axis
    directional_scale: float = 1.0

    def __post_init__(self):
        if self.stride < 1:
            raise InvalidParameterError(f"stride must be >= 1, got {self.stride}")


def agp_initialize(in6: InputVolume6, labels: LabelVolume,
                   config: PrimingConfig | None = None) -> Scene:
    """One Gaussian per foreground voxel, primed from the 6-channel volume.

    Position is the voxel's world coordinate; the DC spherical-harmonic
    coefficients invert the shading formula so a head-on render reproduces the
    voxel's transfer-function color; opacity_raw is the logit of the TF alpha;
    the directional mean defaults to (0, 0, 1) and the covariance to the
    unit-scaled identity (spatial scale = half the effective voxel pitch).
    """
    config = config or PrimingConfig()
    if not labels.consolidated:
        raise InvalidParameterError("labels must be consolidated")
    if labels.dims != in6.dims:
        raise VolumeFormatError(
            f"labels dims {labels.dims} do not match volume dims {in6.dims}")
    s = config.stride
    lab = labels.labels[::s, ::s, ::s]
    chans = in6.channels[:, ::s, ::s, ::s]
    zi, yi, xi = np.nonzero(lab)
    if zi.size == 0:
        raise EmptySceneError("volume has no foreground voxels")
    index_xyz = np.stack([xi, yi, zi], axis=1) * s
    mu_p = voxel_world_coords(index_xyz, in6.spacing, in6.origin, in6.direction)
    rgb = chans[2:5, zi, yi, xi].T
    alpha = np.clip(chans[5, zi, yi, xi], ALPHA_FLOOR, 1.0 - ALPHA_FLOOR)
    n = zi.size
    sh = np.zeros((n, N_SH))
    sh[:, :3] = (rgb - 0.5) / SH_C0
    scene = Scene(
        mu_p=mu_p,
        mu_d=np.tile(DEFAULT_MU_D, (n, 1)),
        cov_raw=np.zeros((n, N_COV_RAW)),
        sh=sh,
        opacity_raw=logit(alpha),
        labels=lab[zi, yi, xi],
        spacing=in6.spacing,
        origin=in6.origin,
        direction=in6.direction,
        spatial_scale=in6.spacing * s / 2.0,
        directional_scale=config.directional_scale,
    )
    _count_instantiation()
    logger.info("primed %d gaussians (stride %d)", n, s)
    return scene


N_PSI_CHANNELS = 37
# Channel layout of the 37-channel parameter volume.
PSI_MU_D = slice(0, 3)        # offset from the default directional mean
PSI_SH_DC = slice(3, 6)       # offset added to the primed DC coefficients
PSI_SH_REST = slice(6, 15)    # degree-1 coefficients, used as-is
PSI_OPACITY = 15              # offset added to the base TF alpha
PSI_COV_DIAG = slice(16, 22)  # log-diagonal of the Cholesky factor
PSI_COV_OFF = slice(22, 37)   # raw off-diagonal entries


@dataclass(frozen=True)
class ParamVolume:
    """37-channel per-voxel Gaussian parameters at half input resolution."""

    channels: np.ndarray  # (37, D', H', W')

    def __post_init__(self):
        data = np.asarray(self.channels, dtype=np.float64)
        if data.ndim != 4 or data.shape[0] != N_PSI_CHANNELS:
            raise InvalidParameterError(
                f"channels must have shape (37, D', H', W'), got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise InvalidParameterError("channels contain non-finite values")
        object.__setattr__(self, "channels", data)

    @property
    def dims(self):
        return self.channels.shape[1:]


def _half_grid(in6: InputVolume6, labels: LabelVolume, dims):
    """Nearest-neighbor views of labels and base channels on the half grid."""
    dp, hp, wp = dims
    lab = labels.labels[::2, ::2, ::2][:dp, :hp, :wp]
    base = in6.channels[:, ::2, ::2, ::2][:, :dp, :hp, :wp]
    return lab, base


def decode_param_volume(psi: ParamVolume, in6: InputVolume6,
                        labels: LabelVolume) -> Scene:
    """Instantiate a scene from a predicted parameter volume.

    The half-resolution grid samples every other full-resolution voxel
    (nearest-neighbor labels and base channels at even indices). Predicted
    channels are combined with the primed base values: the DC color and
    opacity channels are offsets, the directional mean is an offset from
    (0, 0, 1), degree-1 SH and raw covariance are used directly. Note the
    opacity convention: base alpha plus offset, with the sigmoid applied at
    render time (so zero offsets do not reproduce the priming's logit).
    """
    if not labels.consolidated:
        raise InvalidParameterError("labels must be consolidated")
    if labels.dims != in6.dims:
        raise VolumeFormatError(
            f"labels dims {labels.dims} do not match volume dims {in6.dims}")
    expected = tuple(d // 2 for d in in6.dims)
    if psi.dims != expected or min(expected) < 1:
        raise VolumeFormatError(
            f"parameter volume dims {psi.dims} do not match half-resolution "
            f"grid {expected}")
    lab, base = _half_grid(in6, labels, psi.dims)
    zi, yi, xi = np.nonzero(lab)
    if zi.size == 0:
        raise EmptySceneError("half-resolution grid has no foreground voxels")
    index_xyz = np.stack([xi, yi, zi], axis=1) * 2
    mu_p = voxel_world_coords(index_xyz, in6.spacing, in6.origin, in6.direction)
    pred = psi.channels[:, zi, yi, xi]
    base_rgb = base[2:5, zi, yi, xi].T
    base_alpha = base[5, zi, yi, xi]
    n = zi.size
    sh = np.zeros((n, N_SH))
    sh[:, :3] = (base_rgb - 0.5) / SH_C0 + pred[PSI_SH_DC].T
    sh[:, 3:] = pred[PSI_SH_REST].T
    cov_raw = np.empty((n, N_COV_RAW))
    cov_raw[:, :6] = pred[PSI_COV_DIAG].T
    cov_raw[:, 6:] = pred[PSI_COV_OFF].T
    scene = Scene(
        mu_p=mu_p,
        mu_d=DEFAULT_MU_D + pred[PSI_MU_D].T,
        cov_raw=cov_raw,
        sh=sh,
        opacity_raw=base_alpha + pred[PSI_OPACITY],
        labels=lab[zi, yi, xi],
        spacing=in6.spacing,
        origin=in6.origin,
        direction=in6.direction,
        spatial_scale=in6.spacing,  # half grid: effective pitch 2s, scale s
        directional_scale=1.0,
    )
    _count_instantiation()
    logger.info("decoded %d gaussians from parameter volume", n)
    return scene


def encode_param_volume(scene: Scene, in6: InputVolume6,
                        labels: LabelVolume) -> ParamVolume:
    """Inverse of :func:`decode_param_volume` on the foreground voxels.

    Background voxels of the result are zero; the scene must have been
    produced by decoding (same foreground order). Offset channels are
    recovered as ``value - base``, which is exact at the float32 interchange
    precision of the parameter-volume file format.
    """
    if not labels.consolidated:
        raise InvalidParameterError("labels must be consolidated")
    dims = tuple(d // 2 for d in in6.dims)
    lab, base = _half_grid(in6, labels, dims)
    zi, yi, xi = np.nonzero(lab)
    if zi.size != len(scene):
        raise InvalidParameterError(
            f"scene has {len(scene)} gaussians but the half grid has "
            f"{zi.size} foreground voxels")
    base_rgb = base[2:5, zi, yi, xi].T
    base_alpha = base[5, zi, yi, xi]
    channels = np.zeros((N_PSI_CHANNELS,) + dims)
    channels[PSI_MU_D, zi, yi, xi] = (scene.mu_d - DEFAULT_MU_D).T
    channels[PSI_SH_DC, zi, yi, xi] = (scene.sh[:, :3] - (base_rgb - 0.5) / SH_C0).T
    channels[PSI_SH_REST, zi, yi, xi] = scene.sh[:, 3:].T
    channels[PSI_OPACITY, zi, yi, xi] = scene.opacity_raw - base_alpha
    channels[PSI_COV_DIAG, zi, yi, xi] = scene.cov_raw[:, :6].T
    channels[PSI_COV_OFF, zi, yi, xi] = scene.cov_raw[:, 6:].T
    return ParamVolume(channels=channels)


def load_param_volume(path) -> ParamVolume:
    """Read a channel-major float32 payload + sidecar descriptor."""
    path = Path(path)
    meta_path = path.with_suffix(".meta")
    raw_path = path.with_suffix(".raw")
    if not meta_path.is_file():
        raise VolumeFormatError(f"missing descriptor {meta_path}")
    if not raw_path.is_file():
        raise VolumeFormatError(f"missing payload {raw_path}")
    entries = {}
    for line in meta_path.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        entries[key.strip()] = value.strip()
    try:
        channels = int(entries["channels"])
        dims = tuple(int(x) for x in entries["dims"].split())
    except (KeyError, ValueError) as exc:
        raise VolumeFormatError(f"{meta_path}: bad descriptor: {exc}") from exc
    if channels != N_PSI_CHANNELS or len(dims) != 3:
        raise VolumeFormatError(
            f"{meta_path}: expected 37 channels and 3 dims, got {channels} "
            f"channels, dims {dims}")
    payload = raw_path.read_bytes()
    expected = channels * dims[0] * dims[1] * dims[2] * 4
    if len(payload) != expected:
        raise VolumeFormatError(
            f"{raw_path}: payload is {len(payload)} bytes, descriptor implies "
            f"{expected}")
    data = np.frombuffer(payload, dtype="<f4").reshape((channels,) + dims)
    return ParamVolume(channels=data.astype(np.float64))


def save_param_volume(psi: ParamVolume, path) -> None:
    path = Path(path)
    dp, hp, wp = psi.dims
    path.with_suffix(".meta").write_text(
        f"channels={N_PSI_CHANNELS}\ndims={dp} {hp} {wp}\n", encoding="utf-8")
    path.with_suffix(".raw").write_bytes(
        psi.channels.astype("<f4").tobytes())


def filter_scene(scene: Scene, group_mask) -> Scene:
    """Subset to Gaussians whose label is in ``group_mask`` (iterable of ints).

    O(n) index selection; never re-instantiates (the instantiation counter is
    untouched), which is what makes group toggling free.
    """
    groups = np.zeros(N_GROUPS, dtype=bool)
    for g in group_mask:
        if not 0 <= int(g) < N_GROUPS:
            raise InvalidParameterError(f"group index {g} outside [0, 11]")
        groups[int(g)] = True
    keep = groups[scene.labels]
    return scene.take(np.nonzero(keep)[0])
