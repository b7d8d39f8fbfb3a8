"""Scene file format.

Layout (little-endian throughout):

* magic ``G6DS`` (4 bytes), format version u32, gaussian count u64
* metadata block: spacing (3 f64), origin (3 f64), direction (9 f64),
  spatial_scale (3 f64), directional_scale (f64)
* ``count`` fixed 168-byte records: mu_p (3 f32), mu_d (3 f32),
  cov_raw (21 f32), sh (12 f32), opacity_raw (f32), label (u8), 7 pad bytes

Parameters are stored as float32, so saving rounds the in-memory float64
values; a load-save-load cycle is always bit-stable.
"""

from pathlib import Path

import numpy as np

from .priming import Scene, _count_instantiation

MAGIC = b"G6DS"
VERSION = 1

_HEADER = np.dtype([
    ("magic", "S4"),
    ("version", "<u4"),
    ("count", "<u8"),
])
_META = np.dtype([
    ("spacing", "<f8", 3),
    ("origin", "<f8", 3),
    ("direction", "<f8", (3, 3)),
    ("spatial_scale", "<f8", 3),
    ("directional_scale", "<f8"),
])
_RECORD = np.dtype([
    ("mu_p", "<f4", 3),
    ("mu_d", "<f4", 3),
    ("cov_raw", "<f4", 21),
    ("sh", "<f4", 12),
    ("opacity_raw", "<f4"),
    ("label", "u1"),
    ("pad", "u1", 7),
])
assert _RECORD.itemsize == 168


class SceneFormatError(ValueError):
    """Bad magic, unsupported version, or truncated payload."""


def save_scene(scene: Scene, path) -> None:
    path = Path(path)
    header = np.zeros(1, dtype=_HEADER)
    header["magic"] = MAGIC
    header["version"] = VERSION
    header["count"] = len(scene)
    meta = np.zeros(1, dtype=_META)
    meta["spacing"] = scene.spacing
    meta["origin"] = scene.origin
    meta["direction"] = scene.direction
    meta["spatial_scale"] = scene.spatial_scale
    meta["directional_scale"] = scene.directional_scale
    records = np.zeros(len(scene), dtype=_RECORD)
    records["mu_p"] = scene.mu_p
    records["mu_d"] = scene.mu_d
    records["cov_raw"] = scene.cov_raw
    records["sh"] = scene.sh
    records["opacity_raw"] = scene.opacity_raw
    records["label"] = scene.labels
    with open(path, "wb") as fh:
        fh.write(header.tobytes())
        fh.write(meta.tobytes())
        fh.write(records.tobytes())


def load_scene(path) -> Scene:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _HEADER.itemsize + _META.itemsize:
        raise SceneFormatError(f"{path}: file too short for a scene header")
    header = np.frombuffer(blob, dtype=_HEADER, count=1)[0]
    if bytes(header["magic"]) != MAGIC:
        raise SceneFormatError(f"{path}: bad magic {bytes(header['magic'])!r}")
    if int(header["version"]) != VERSION:
        raise SceneFormatError(
            f"{path}: unsupported format version {int(header['version'])}")
    count = int(header["count"])
    offset = _HEADER.itemsize
    meta = np.frombuffer(blob, dtype=_META, count=1, offset=offset)[0]
    offset += _META.itemsize
    expected = offset + count * _RECORD.itemsize
    if len(blob) != expected:
        raise SceneFormatError(
            f"{path}: payload is {len(blob)} bytes, header implies {expected}")
    records = np.frombuffer(blob, dtype=_RECORD, count=count, offset=offset)
    scene = Scene(
        mu_p=records["mu_p"].astype(np.float64).reshape(count, 3),
        mu_d=records["mu_d"].astype(np.float64).reshape(count, 3),
        cov_raw=records["cov_raw"].astype(np.float64).reshape(count, 21),
        sh=records["sh"].astype(np.float64).reshape(count, 12),
        opacity_raw=records["opacity_raw"].astype(np.float64).reshape(count),
        labels=records["label"].copy(),
        spacing=np.array(meta["spacing"]),
        origin=np.array(meta["origin"]),
        direction=np.array(meta["direction"]),
        spatial_scale=np.array(meta["spatial_scale"]),
        directional_scale=float(meta["directional_scale"]),
    )
    _count_instantiation()
    return scene
