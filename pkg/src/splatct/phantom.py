"""Synthetic CT phantom: nested ellipsoids for demos and end-to-end tests.

The phantom is a deterministic function of its geometry arguments, so tests
can regenerate it bit-identically. Three concentric ellipsoids carry raw
anatomical labels that consolidate to the lung, liver, and skeleton groups;
each voxel takes the innermost ellipsoid that contains it. Intensities ramp
from the tissue's base HU at the region boundary toward the center, giving
the transfer functions a gradient to act on.
"""

from __future__ import annotations

import numpy as np

from .volume import CtVolume, LabelVolume, VolumeFormatError

# Raw anatomical labels (consolidation maps them to lung 5, liver 2,
# skeleton 7).
LABEL_LUNG = 10
LABEL_LIVER = 5
LABEL_SKELETON = 30

HU_AIR = -1000.0

# (label, semi-axes as fractions of the volume half-extent, boundary HU,
# HU rise from boundary to region center), outermost first.
REGIONS = (
    (LABEL_LUNG, (0.84, 0.72, 0.62), -850.0, 100.0),
    (LABEL_LIVER, (0.52, 0.44, 0.36), 120.0, 60.0),
    (LABEL_SKELETON, (0.24, 0.18, 0.14), 700.0, 300.0),
)


def make_phantom(dims=(64, 64, 64), spacing=(1.5, 1.5, 1.5)):
    """Build the nested-ellipsoid phantom.

    Returns ``(volume, labels)`` with raw labels. The volume is centered on
    the world origin with an identity direction matrix, so voxel (i, j, k)
    sits at ``(index - (n - 1) / 2) * spacing`` per axis.
    """
    dims = tuple(int(n) for n in dims)
    if len(dims) != 3 or min(dims) < 8:
        raise VolumeFormatError(f"phantom dims must be 3 values >= 8, got {dims}")
    spacing = np.asarray(spacing, dtype=np.float64)
    if spacing.shape != (3,) or np.any(spacing <= 0):
        raise VolumeFormatError(f"spacing must be 3 positive values, got {spacing}")
    d, h, w = dims
    nx = np.array([w, h, d], dtype=np.float64)
    half_extent = nx * spacing / 2.0
    origin = -(nx - 1) / 2.0 * spacing

    # World coordinates per voxel, broadcast over the (z, y, x) grid.
    xs = origin[0] + np.arange(w) * spacing[0]
    ys = origin[1] + np.arange(h) * spacing[1]
    zs = origin[2] + np.arange(d) * spacing[2]
    x = xs[None, None, :]
    y = ys[None, :, None]
    z = zs[:, None, None]

    intensities = np.full((d, h, w), HU_AIR)
    labels = np.zeros((d, h, w), dtype=np.uint8)
    for label, fractions, hu_base, hu_rise in REGIONS:
        ax, ay, az = np.asarray(fractions) * half_extent
        u = np.sqrt((x / ax) ** 2 + (y / ay) ** 2 + (z / az) ** 2)
        inside = u <= 1.0
        intensities[inside] = hu_base + hu_rise * (1.0 - u[inside])
        labels[inside] = label

    vol = CtVolume(intensities=intensities, spacing=spacing, origin=origin,
                   direction=np.eye(3))
    return vol, LabelVolume(labels=labels, consolidated=False)


def foreground_count(labels: LabelVolume) -> int:
    """Number of voxels a stride-1 priming pass instantiates."""
    return int(np.count_nonzero(labels.labels))
