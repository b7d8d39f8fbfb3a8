/** Orbit camera state: spherical coordinates around a world-space target. */

import type { BoundingBox, Vec3 } from "./api";

export interface OrbitState {
  azimuth: number;
  elevation: number;
  radius: number;
  target: Vec3;
}

/** Just short of the poles, where the up vector would degenerate. */
export const ELEVATION_LIMIT = 1.55;

const TWO_PI = 2 * Math.PI;

export function orbitPosition(s: OrbitState): Vec3 {
  const ce = Math.cos(s.elevation);
  return [
    s.target[0] + s.radius * ce * Math.sin(s.azimuth),
    s.target[1] + s.radius * Math.sin(s.elevation),
    s.target[2] + s.radius * ce * Math.cos(s.azimuth),
  ];
}

export function rotated(s: OrbitState, dAzimuth: number, dElevation: number): OrbitState {
  const elevation = Math.min(
    ELEVATION_LIMIT, Math.max(-ELEVATION_LIMIT, s.elevation + dElevation));
  const azimuth = (s.azimuth + dAzimuth) % TWO_PI;
  return { ...s, azimuth, elevation };
}

export function zoomed(s: OrbitState, factor: number, minRadius: number,
                       maxRadius: number): OrbitState {
  const radius = Math.min(maxRadius, Math.max(minRadius, s.radius * factor));
  return { ...s, radius };
}

/**
 * Move the target by (dx, dy) world units along the camera's screen axes.
 * The displacement stays orthogonal to the view direction, so the subject
 * slides across the frame without changing its distance.
 */
export function panned(s: OrbitState, dx: number, dy: number): OrbitState {
  const ca = Math.cos(s.azimuth);
  const sa = Math.sin(s.azimuth);
  const ce = Math.cos(s.elevation);
  const se = Math.sin(s.elevation);
  const right: Vec3 = [ca, 0, -sa];
  const up: Vec3 = [-sa * se, ce, -ca * se];
  const target: Vec3 = [
    s.target[0] - dx * right[0] + dy * up[0],
    s.target[1] - dx * right[1] + dy * up[1],
    s.target[2] - dx * right[2] + dy * up[2],
  ];
  return { ...s, target };
}

/** Initial orbit that frames the whole bounding box at the given fov. */
export function framingOrbit(box: BoundingBox, fovY: number): OrbitState {
  const target: Vec3 = [
    (box.min[0] + box.max[0]) / 2,
    (box.min[1] + box.max[1]) / 2,
    (box.min[2] + box.max[2]) / 2,
  ];
  const dx = box.max[0] - box.min[0];
  const dy = box.max[1] - box.min[1];
  const dz = box.max[2] - box.min[2];
  const halfDiag = Math.sqrt(dx * dx + dy * dy + dz * dz) / 2;
  const radius = (1.2 * Math.max(halfDiag, 1e-6)) / Math.tan(fovY / 2);
  return { azimuth: 0.6, elevation: 0.3, radius, target };
}
