"""Pinhole camera model and look-at construction.

Camera frame convention: x right, y down, z forward (image rows grow
downward). ``rotation`` maps world to camera coordinates, so a world point
projects via ``t = rotation @ (p - position)``, ``u = fx t_x / t_z + cx``,
``v = fy t_y / t_z + cy``. Pixel centers sit at integer coordinates, with
``cx = (width - 1) / 2`` and ``cy = (height - 1) / 2``.
"""

import math
from dataclasses import dataclass

import numpy as np

from .core import DegenerateGeometryError, InvalidParameterError


@dataclass(frozen=True)
class Camera:
    position: np.ndarray  # (3,) mm
    rotation: np.ndarray  # (3, 3) world-to-camera
    fov_y: float          # radians
    width: int
    height: int
    near: float = 1.0     # mm
    far: float = 1e5      # mm

    def __post_init__(self):
        position = np.asarray(self.position, dtype=np.float64)
        rotation = np.asarray(self.rotation, dtype=np.float64)
        if position.shape != (3,) or not np.all(np.isfinite(position)):
            raise InvalidParameterError(f"position must be a finite 3-vector")
        if rotation.shape != (3, 3) or not np.all(np.isfinite(rotation)):
            raise InvalidParameterError("rotation must be a finite 3x3 matrix")
        if np.abs(rotation @ rotation.T - np.eye(3)).max() > 1e-6:
            raise InvalidParameterError("rotation must be orthonormal")
        if not 0.0 < self.fov_y < math.pi:
            raise InvalidParameterError(f"fov_y must lie in (0, pi), got {self.fov_y}")
        if self.width < 1 or self.height < 1:
            raise InvalidParameterError("width and height must be positive")
        if not 0.0 < self.near < self.far:
            raise InvalidParameterError(
                f"need 0 < near < far, got near={self.near} far={self.far}")
        position.setflags(write=False)
        rotation.setflags(write=False)
        object.__setattr__(self, "position", position)
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @property
    def focal(self) -> float:
        """Focal length in pixels (square pixels, fx = fy)."""
        return self.height / (2.0 * math.tan(self.fov_y / 2.0))

    @property
    def cx(self) -> float:
        return (self.width - 1) / 2.0

    @property
    def cy(self) -> float:
        return (self.height - 1) / 2.0


def look_at_rotation(position, target, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """World-to-camera rotation for a camera at ``position`` facing ``target``.

    Rows are the camera's x (screen right), y (screen down), and z (forward)
    axes in world coordinates. ``up`` orients the roll: world ``up`` maps to
    screen up.
    """
    position = np.asarray(position, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    forward = target - position
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise DegenerateGeometryError("camera position coincides with target")
    forward = forward / norm
    right = np.cross(forward, up)
    norm = np.linalg.norm(right)
    if norm < 1e-9:
        raise DegenerateGeometryError("up vector is parallel to the view direction")
    right = right / norm
    down = np.cross(forward, right)
    return np.stack([right, down, forward])


def make_camera(position, target, up=(0.0, 1.0, 0.0), fov_y=0.8, width=512,
                height=512, near=1.0, far=1e5) -> Camera:
    """Convenience look-at constructor."""
    rotation = look_at_rotation(position, target, up)
    return Camera(position=np.asarray(position, dtype=np.float64),
                  rotation=rotation, fov_y=fov_y, width=width, height=height,
                  near=near, far=far)
