// Orbit camera math: poses are 4x4 camera-to-world matrices in the dataset
// convention (right-handed, camera looks along its local -z, +z up).

export interface Orbit {
  azimuth: number; // radians
  elevation: number; // radians
  radius: number;
  target: [number, number, number];
}

function cross(a: number[], b: number[]): number[] {
  return [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]];
}

function normalize(v: number[]): number[] {
  const n = Math.hypot(v[0], v[1], v[2]) || 1;
  return [v[0] / n, v[1] / n, v[2] / n];
}

export function orbitPose(orbit: Orbit): number[][] {
  const { azimuth, elevation, radius, target } = orbit;
  const eye = [
    target[0] + radius * Math.cos(azimuth) * Math.cos(elevation),
    target[1] + radius * Math.sin(azimuth) * Math.cos(elevation),
    target[2] + radius * Math.sin(elevation),
  ];
  const zc = normalize([eye[0] - target[0], eye[1] - target[1], eye[2] - target[2]]);
  let xc = cross([0, 0, 1], zc);
  if (Math.hypot(xc[0], xc[1], xc[2]) < 1e-8) xc = cross([0, 1, 0], zc);
  xc = normalize(xc);
  const yc = cross(zc, xc);
  return [
    [xc[0], yc[0], zc[0], eye[0]],
    [xc[1], yc[1], zc[1], eye[1]],
    [xc[2], yc[2], zc[2], eye[2]],
    [0, 0, 0, 1],
  ];
}

export function pan(orbit: Orbit, dAzimuth: number, dElevation: number): Orbit {
  const lim = Math.PI / 2 - 0.05;
  return {
    ...orbit,
    azimuth: orbit.azimuth + dAzimuth,
    elevation: Math.min(lim, Math.max(-lim, orbit.elevation + dElevation)),
  };
}

export function zoom(orbit: Orbit, factor: number): Orbit {
  return { ...orbit, radius: Math.min(20, Math.max(0.2, orbit.radius * factor)) };
}
