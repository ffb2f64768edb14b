/** Minimal 3-D math for rendering and pose nudging (no runtime deps). */

export type Vec3 = [number, number, number];

export interface Quat {
  w: number;
  x: number;
  y: number;
  z: number;
}

export interface Transform {
  rotation: Quat;
  translation: { x: number; y: number; z: number };
}

export const IDENTITY: Transform = {
  rotation: { w: 1, x: 0, y: 0, z: 0 },
  translation: { x: 0, y: 0, z: 0 },
};

export function quatMultiply(a: Quat, b: Quat): Quat {
  return {
    w: a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
    x: a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
    y: a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
    z: a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
  };
}

export function quatFromAxisAngle(axis: Vec3, angleRad: number): Quat {
  const n = Math.hypot(axis[0], axis[1], axis[2]);
  const s = Math.sin(angleRad / 2) / n;
  return { w: Math.cos(angleRad / 2), x: axis[0] * s, y: axis[1] * s, z: axis[2] * s };
}

export function quatRotate(q: Quat, v: Vec3): Vec3 {
  // v + 2 * (w * (u x v) + u x (u x v)) with u the vector part
  const ux = q.x, uy = q.y, uz = q.z;
  const c1: Vec3 = [
    uy * v[2] - uz * v[1],
    uz * v[0] - ux * v[2],
    ux * v[1] - uy * v[0],
  ];
  const c2: Vec3 = [
    uy * c1[2] - uz * c1[1],
    uz * c1[0] - ux * c1[2],
    ux * c1[1] - uy * c1[0],
  ];
  return [
    v[0] + 2 * (q.w * c1[0] + c2[0]),
    v[1] + 2 * (q.w * c1[1] + c2[1]),
    v[2] + 2 * (q.w * c1[2] + c2[2]),
  ];
}

export function applyTransform(t: Transform, v: Vec3): Vec3 {
  const r = quatRotate(t.rotation, v);
  return [r[0] + t.translation.x, r[1] + t.translation.y, r[2] + t.translation.z];
}

/** Translate a pose by a world-frame offset (position nudge). */
export function nudgeTranslation(pose: Transform, delta: Vec3): Transform {
  return {
    rotation: { ...pose.rotation },
    translation: {
      x: pose.translation.x + delta[0],
      y: pose.translation.y + delta[1],
      z: pose.translation.z + delta[2],
    },
  };
}

/** Rotate a pose about a world axis through its own origin (orientation nudge). */
export function nudgeRotation(pose: Transform, axis: Vec3, angleRad: number): Transform {
  const dq = quatFromAxisAngle(axis, angleRad);
  return {
    rotation: quatMultiply(dq, pose.rotation),
    translation: { ...pose.translation },
  };
}

export function addVec(a: Vec3, b: Vec3): Vec3 {
  return [a[0] + b[0], a[1] + b[1], a[2] + b[2]];
}

export function scaleVec(a: Vec3, s: number): Vec3 {
  return [a[0] * s, a[1] * s, a[2] * s];
}
