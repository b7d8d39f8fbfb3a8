"""CT volume ingestion and preparation.

Covers the raw+sidecar file format, isotropic resampling, foreground-based
HU normalization, consolidation of the 120 anatomical labels into 12 semantic
groups, and piecewise-linear RGBA transfer functions, ending in the 6-channel
input volume (normalized HU, group label, R, G, B, A).

Geometry conventions: arrays are indexed ``[z, y, x]`` with shape (D, H, W)
and the raw payload is x-fastest. Index vectors, spacing, and origin are
ordered (x, y, z); a voxel at array position ``[k, j, i]`` sits at world
position ``origin + direction @ (spacing * (i, j, k))``.
"""

from __future__ import annotations

import importlib.resources
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

HU_MIN = -1024.0
HU_MAX = 3072.0
N_GROUPS = 12
N_RAW_LABELS = 120

GROUP_NAMES = (
    "Background/Other",
    "Spleen",
    "Liver",
    "Digestive Group",
    "Gland Group",
    "Lung Group",
    "Trachea",
    "Skeleton Group",
    "CardioVascular Group",
    "Nervous System Group",
    "Muscle Group",
    "Kidney/Urogenital Group",
)

# Raw anatomical label (0-119) -> consolidated group (0-11). Order: background,
# spleen, kidneys, gallbladder, liver, stomach, pancreas, adrenals, lung lobes,
# esophagus, trachea, thyroid, bowel, bladder/prostate/cysts, vertebrae,
# cardiovascular, limb/pelvis bones, spinal cord, gluteal/core muscles, brain,
# skull, ribs, sternum/cartilage, user-defined coronary and pulmonary arteries.
LABEL_TO_GROUP = np.array(
    [0, 1, 11, 11, 3, 2, 3, 3, 4, 4]          # 0-9
    + [5, 5, 5, 5, 5, 3, 6, 4, 3, 3]          # 10-19
    + [3, 11, 11, 11, 11]                      # 20-24
    + [7] * 26                                 # 25-50 sacrum + vertebrae
    + [8] * 18                                 # 51-68 heart + vessels
    + [7] * 10                                 # 69-78 limb and pelvis bones
    + [9]                                      # 79 spinal cord
    + [10] * 10                                # 80-89 muscles
    + [9, 7]                                   # 90 brain, 91 skull
    + [7] * 26                                 # 92-117 ribs, sternum, cartilage
    + [8, 8],                                  # 118-119 user-defined vessels
    dtype=np.uint8,
)
assert LABEL_TO_GROUP.shape == (N_RAW_LABELS,)


class VolumeFormatError(ValueError):
    """Missing or malformed volume descriptor, or payload size mismatch."""


class DegenerateVolumeError(ArithmeticError):
    """Volume statistics unusable (constant intensities, empty foreground)."""


class UnknownLabelError(ValueError):
    """Raw label outside the 120-entry consolidation table."""


def _as_array(value, shape, name):
    arr = np.asarray(value, dtype=np.float64)
    if arr.shape != shape:
        raise VolumeFormatError(f"{name} must have shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise VolumeFormatError(f"{name} contains non-finite values")
    return arr


@dataclass(frozen=True)
class CtVolume:
    """A CT scan in Hounsfield Units plus its world-space placement."""

    intensities: np.ndarray  # (D, H, W) float64, HU
    spacing: np.ndarray      # (3,) mm per voxel, (x, y, z)
    origin: np.ndarray       # (3,) mm, world position of voxel (0, 0, 0)
    direction: np.ndarray    # (3, 3) orthonormal, index axes -> world axes

    def __post_init__(self):
        data = np.asarray(self.intensities, dtype=np.float64)
        if data.ndim != 3 or min(data.shape) < 1:
            raise VolumeFormatError(f"intensities must be 3D, got shape {data.shape}")
        object.__setattr__(self, "intensities", data)
        spacing = _as_array(self.spacing, (3,), "spacing")
        if np.any(spacing <= 0):
            raise VolumeFormatError(f"spacing must be positive, got {spacing}")
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", _as_array(self.origin, (3,), "origin"))
        direction = _as_array(self.direction, (3, 3), "direction")
        if abs(abs(np.linalg.det(direction)) - 1.0) > 1e-6:
            raise VolumeFormatError("direction matrix must be orthonormal")
        object.__setattr__(self, "direction", direction)

    @property
    def dims(self):
        """(D, H, W) voxel counts."""
        return self.intensities.shape

    def with_intensities(self, intensities) -> "CtVolume":
        return CtVolume(intensities=intensities, spacing=self.spacing,
                        origin=self.origin, direction=self.direction)


@dataclass(frozen=True)
class LabelVolume:
    """Per-voxel anatomical labels, raw (0-119) or consolidated (0-11)."""

    labels: np.ndarray  # (D, H, W) integer
    consolidated: bool = False

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3:
            raise VolumeFormatError(f"labels must be 3D, got shape {labels.shape}")
        if not np.issubdtype(labels.dtype, np.integer):
            raise VolumeFormatError(f"labels must be integers, got {labels.dtype}")
        limit = N_GROUPS if self.consolidated else N_RAW_LABELS
        if labels.size and (labels.min() < 0 or labels.max() >= limit):
            raise UnknownLabelError(
                f"labels must lie in [0, {limit - 1}], got "
                f"[{labels.min()}, {labels.max()}]")
        object.__setattr__(self, "labels", labels.astype(np.uint8))

    @property
    def dims(self):
        return self.labels.shape


@dataclass(frozen=True)
class TransferFunction:
    """Piecewise-linear RGBA ramp over HU: colors 0-255, alpha 0-1."""

    name: str
    hu: np.ndarray    # (K,) strictly increasing
    rgba: np.ndarray  # (K, 4)

    def __post_init__(self):
        hu = np.asarray(self.hu, dtype=np.float64)
        rgba = np.asarray(self.rgba, dtype=np.float64)
        if hu.ndim != 1 or hu.size < 2 or rgba.shape != (hu.size, 4):
            raise VolumeFormatError(
                f"transfer function {self.name!r} needs matching hu (K,) and "
                f"rgba (K, 4) with K >= 2")
        if np.any(np.diff(hu) <= 0):
            raise VolumeFormatError(
                f"transfer function {self.name!r} HU points must be strictly "
                "increasing")
        if rgba[:, :3].min() < 0 or rgba[:, :3].max() > 255:
            raise VolumeFormatError(
                f"transfer function {self.name!r} colors must lie in [0, 255]")
        if rgba[:, 3].min() < 0 or rgba[:, 3].max() > 1:
            raise VolumeFormatError(
                f"transfer function {self.name!r} alpha must lie in [0, 1]")
        object.__setattr__(self, "hu", hu)
        object.__setattr__(self, "rgba", rgba)


@dataclass(frozen=True)
class InputVolume6:
    """6-channel conditioning volume: [normalized HU, group label, R, G, B, A].

    Carries the source volume's world placement so scene instantiation can
    compute voxel world coordinates.
    """

    channels: np.ndarray  # (6, D, H, W) float64, RGBA already scaled to [0, 1]
    spacing: np.ndarray   # (3,) mm, (x, y, z)
    origin: np.ndarray    # (3,) mm
    direction: np.ndarray  # (3, 3) orthonormal

    def __post_init__(self):
        data = np.asarray(self.channels, dtype=np.float64)
        if data.ndim != 4 or data.shape[0] != 6:
            raise VolumeFormatError(
                f"channels must have shape (6, D, H, W), got {data.shape}")
        object.__setattr__(self, "channels", data)
        object.__setattr__(self, "spacing", _as_array(self.spacing, (3,), "spacing"))
        object.__setattr__(self, "origin", _as_array(self.origin, (3,), "origin"))
        object.__setattr__(self, "direction",
                           _as_array(self.direction, (3, 3), "direction"))

    @property
    def dims(self):
        return self.channels.shape[1:]


def _meta_path(path: Path) -> Path:
    return path.with_suffix(".meta")


def _raw_path(path: Path) -> Path:
    return path.with_suffix(".raw")


def _parse_meta(text: str, path) -> dict:
    entries = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise VolumeFormatError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        entries[key.strip()] = value.strip()
    return entries


def _meta_floats(entries, key, count, path):
    if key not in entries:
        raise VolumeFormatError(f"{path}: missing required key {key!r}")
    parts = entries[key].split()
    if len(parts) != count:
        raise VolumeFormatError(f"{path}: key {key!r} needs {count} values")
    try:
        return np.array([float(p) for p in parts])
    except ValueError as exc:
        raise VolumeFormatError(f"{path}: key {key!r}: {exc}") from exc


def load_volume(path) -> CtVolume:
    """Read ``<name>.raw`` (int16 LE, x-fastest) + ``<name>.meta``.

    Accepts the stem or either filename. HU values are clamped to
    [-1024, 3072] on load.
    """
    path = Path(path)
    meta_path = _meta_path(path)
    raw_path = _raw_path(path)
    if not meta_path.is_file():
        raise VolumeFormatError(f"missing descriptor {meta_path}")
    if not raw_path.is_file():
        raise VolumeFormatError(f"missing payload {raw_path}")
    entries = _parse_meta(meta_path.read_text(encoding="utf-8"), meta_path)
    dims_f = _meta_floats(entries, "dims", 3, meta_path)
    if np.any(dims_f != np.round(dims_f)) or np.any(dims_f < 1):
        raise VolumeFormatError(f"{meta_path}: dims must be positive integers")
    d, h, w = (int(x) for x in dims_f)
    spacing = _meta_floats(entries, "spacing", 3, meta_path)
    origin = _meta_floats(entries, "origin", 3, meta_path)
    direction = _meta_floats(entries, "direction", 9, meta_path).reshape(3, 3)
    payload = raw_path.read_bytes()
    expected = d * h * w * 2
    if len(payload) != expected:
        raise VolumeFormatError(
            f"{raw_path}: payload is {len(payload)} bytes, descriptor implies "
            f"{expected}")
    data = np.frombuffer(payload, dtype="<i2").reshape(d, h, w).astype(np.float64)
    np.clip(data, HU_MIN, HU_MAX, out=data)
    return CtVolume(intensities=data, spacing=spacing, origin=origin,
                    direction=direction)


def save_volume(vol: CtVolume, path) -> None:
    """Inverse of :func:`load_volume`; intensities are rounded to int16."""
    path = Path(path)
    d, h, w = vol.dims
    lines = [
        f"dims={d} {h} {w}",
        "spacing=" + " ".join(repr(float(x)) for x in vol.spacing),
        "origin=" + " ".join(repr(float(x)) for x in vol.origin),
        "direction=" + " ".join(repr(float(x)) for x in vol.direction.ravel()),
    ]
    _meta_path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    data = np.clip(np.round(vol.intensities), HU_MIN, HU_MAX).astype("<i2")
    _raw_path(path).write_bytes(data.tobytes())


def _output_dims(dims, spacing, target):
    # (W, H, D) voxel counts paired with (x, y, z) spacing
    d, h, w = dims
    counts = np.array([w, h, d], dtype=np.float64)
    new = np.maximum(1, np.round(counts * spacing / target)).astype(int)
    return new  # (x, y, z) order


def _sample_coords(n_out, n_in, scale):
    # Output voxel centers land at input index i_out * scale, clamped to the
    # valid range so edge voxels replicate rather than extrapolate.
    coords = np.arange(n_out, dtype=np.float64) * scale
    return np.clip(coords, 0.0, n_in - 1.0)


def resample_isotropic(vol: CtVolume, target: float = 1.5) -> CtVolume:
    """Trilinear resample to isotropic ``target`` mm spacing.

    The world position of voxel (0, 0, 0) is preserved; output voxel counts
    are ``round(n * spacing / target)`` per axis.
    """
    if target <= 0:
        raise VolumeFormatError(f"target spacing must be positive, got {target}")
    if np.all(vol.spacing == target):
        return vol
    nx, ny, nz = _output_dims(vol.dims, vol.spacing, target)
    d, h, w = vol.dims
    ux = _sample_coords(nx, w, target / vol.spacing[0])
    uy = _sample_coords(ny, h, target / vol.spacing[1])
    uz = _sample_coords(nz, d, target / vol.spacing[2])
    data = _trilinear(vol.intensities, uz, uy, ux)
    return CtVolume(intensities=data, spacing=np.full(3, float(target)),
                    origin=vol.origin, direction=vol.direction)


def resample_labels(labels: LabelVolume, vol: CtVolume, target: float = 1.5) -> LabelVolume:
    """Nearest-neighbor companion of :func:`resample_isotropic`.

    ``vol`` supplies the geometry the labels share.
    """
    if target <= 0:
        raise VolumeFormatError(f"target spacing must be positive, got {target}")
    if labels.dims != vol.dims:
        raise VolumeFormatError(
            f"labels dims {labels.dims} do not match volume dims {vol.dims}")
    if np.all(vol.spacing == target):
        return labels
    nx, ny, nz = _output_dims(vol.dims, vol.spacing, target)
    d, h, w = vol.dims
    ix = np.round(_sample_coords(nx, w, target / vol.spacing[0])).astype(int)
    iy = np.round(_sample_coords(ny, h, target / vol.spacing[1])).astype(int)
    iz = np.round(_sample_coords(nz, d, target / vol.spacing[2])).astype(int)
    data = labels.labels[np.ix_(iz, iy, ix)]
    return LabelVolume(labels=data, consolidated=labels.consolidated)


def _trilinear(data, uz, uy, ux):
    z0 = np.floor(uz).astype(int)
    y0 = np.floor(uy).astype(int)
    x0 = np.floor(ux).astype(int)
    z1 = np.minimum(z0 + 1, data.shape[0] - 1)
    y1 = np.minimum(y0 + 1, data.shape[1] - 1)
    x1 = np.minimum(x0 + 1, data.shape[2] - 1)
    fz = (uz - z0)[:, None, None]
    fy = (uy - y0)[None, :, None]
    fx = (ux - x0)[None, None, :]
    c000 = data[np.ix_(z0, y0, x0)]
    c001 = data[np.ix_(z0, y0, x1)]
    c010 = data[np.ix_(z0, y1, x0)]
    c011 = data[np.ix_(z0, y1, x1)]
    c100 = data[np.ix_(z1, y0, x0)]
    c101 = data[np.ix_(z1, y0, x1)]
    c110 = data[np.ix_(z1, y1, x0)]
    c111 = data[np.ix_(z1, y1, x1)]
    c00 = c000 * (1 - fx) + c001 * fx
    c01 = c010 * (1 - fx) + c011 * fx
    c10 = c100 * (1 - fx) + c101 * fx
    c11 = c110 * (1 - fx) + c111 * fx
    c0 = c00 * (1 - fy) + c01 * fy
    c1 = c10 * (1 - fy) + c11 * fy
    return c0 * (1 - fz) + c1 * fz


def normalize_hu(vol: CtVolume, labels: LabelVolume | None = None) -> CtVolume:
    """Clip to the foreground [0.5th, 99.5th] percentile window, then z-score.

    Foreground is ``labels != 0`` when labels are supplied, otherwise every
    voxel. The mean and standard deviation are taken over the clipped
    foreground values and applied to the whole volume.
    """
    if labels is not None:
        if labels.dims != vol.dims:
            raise VolumeFormatError(
                f"labels dims {labels.dims} do not match volume dims {vol.dims}")
        fg = vol.intensities[labels.labels != 0]
        if fg.size == 0:
            raise DegenerateVolumeError("no foreground voxels to normalize against")
    else:
        fg = vol.intensities.ravel()
    lo, hi = np.percentile(fg, [0.5, 99.5])
    fg_clipped = np.clip(fg, lo, hi)
    mean = fg_clipped.mean()
    std = fg_clipped.std()
    if std < 1e-12:
        raise DegenerateVolumeError(
            f"zero intensity variance after clipping to [{lo}, {hi}]")
    logger.debug("normalize_hu: clip=[%.1f, %.1f] mean=%.2f std=%.2f", lo, hi, mean, std)
    data = (np.clip(vol.intensities, lo, hi) - mean) / std
    return vol.with_intensities(data)


def consolidate_labels(labels: LabelVolume) -> LabelVolume:
    """Map raw anatomical labels to the 12 consolidated groups."""
    if labels.consolidated:
        return labels
    raw = labels.labels
    if raw.size and raw.max() >= N_RAW_LABELS:
        raise UnknownLabelError(f"raw label {raw.max()} outside [0, 119]")
    return LabelVolume(labels=LABEL_TO_GROUP[raw], consolidated=True)


def eval_transfer_function(tf: TransferFunction, hu):
    """Piecewise-linear RGBA at ``hu`` (scalar or array), per channel.

    Values outside the control-point range clamp to the endpoint values,
    matching ``np.interp`` semantics. Colors stay in table units (0-255).
    """
    hu = np.asarray(hu, dtype=np.float64)
    out = np.stack([np.interp(hu, tf.hu, tf.rgba[:, c]) for c in range(4)], axis=-1)
    return out


def load_transfer_functions(path) -> list[TransferFunction]:
    """Parse a 12-group transfer-function preset file.

    Format: ``group <index> <name>`` headers, each followed by ``hu r g b a``
    rows. Blank lines and ``#`` comments are ignored. Every group 0-11 must
    appear exactly once.
    """
    path = Path(path)
    if not path.is_file():
        raise VolumeFormatError(f"missing transfer-function file {path}")
    groups: dict[int, tuple[str, list]] = {}
    current = None
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("group "):
            parts = line.split(maxsplit=2)
            if len(parts) != 3 or not parts[1].isdigit():
                raise VolumeFormatError(f"{path}:{lineno}: malformed group header")
            idx = int(parts[1])
            if idx in groups:
                raise VolumeFormatError(f"{path}:{lineno}: duplicate group {idx}")
            groups[idx] = (parts[2], [])
            current = idx
            continue
        if current is None:
            raise VolumeFormatError(f"{path}:{lineno}: point row before any group")
        fields = line.split()
        if len(fields) != 5:
            raise VolumeFormatError(f"{path}:{lineno}: expected 'hu r g b a'")
        try:
            groups[current][1].append([float(f) for f in fields])
        except ValueError as exc:
            raise VolumeFormatError(f"{path}:{lineno}: {exc}") from exc
    if sorted(groups) != list(range(N_GROUPS)):
        raise VolumeFormatError(
            f"{path}: preset must define groups 0-11, found {sorted(groups)}")
    tfs = []
    for idx in range(N_GROUPS):
        name, rows = groups[idx]
        arr = np.array(rows)
        tfs.append(TransferFunction(name=name, hu=arr[:, 0], rgba=arr[:, 1:]))
    return tfs


def preset_path(name: str) -> Path:
    """Filesystem path of a bundled transfer-function preset (seen/unseen)."""
    resource = importlib.resources.files("splatct") / "tf_presets" / f"{name}_tf.txt"
    with importlib.resources.as_file(resource) as p:
        if not p.is_file():
            raise VolumeFormatError(f"unknown transfer-function preset {name!r}")
        return Path(p)


def load_preset(name: str) -> list[TransferFunction]:
    return load_transfer_functions(preset_path(name))


def build_input_channels(vol: CtVolume, labels: LabelVolume,
                         tfs: list[TransferFunction], raw: CtVolume) -> InputVolume6:
    """Assemble the 6-channel conditioning volume.

    ``vol`` carries normalized HU for channel 0, ``raw`` the pre-normalization
    HU the transfer functions are defined over. Channels 2-5 are the group's
    RGBA with colors rescaled to [0, 1].
    """
    if not labels.consolidated:
        raise UnknownLabelError("labels must be consolidated before channel building")
    if labels.dims != vol.dims or raw.dims != vol.dims:
        raise VolumeFormatError(
            f"shape mismatch: volume {vol.dims}, labels {labels.dims}, raw {raw.dims}")
    if len(tfs) != N_GROUPS:
        raise VolumeFormatError(f"need {N_GROUPS} transfer functions, got {len(tfs)}")
    d, h, w = vol.dims
    channels = np.zeros((6, d, h, w))
    channels[0] = vol.intensities
    channels[1] = labels.labels
    group_ids = labels.labels
    for g in np.unique(group_ids):
        mask = group_ids == g
        rgba = eval_transfer_function(tfs[int(g)], raw.intensities[mask])
        rgba[:, :3] /= 255.0
        channels[2:6, mask] = rgba.T
    return InputVolume6(channels=channels, spacing=vol.spacing, origin=vol.origin,
                        direction=vol.direction)
