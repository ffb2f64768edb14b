/** Canvas renderer: virtual screens, streamed point clouds under the
 * current camera poses, merged skeletons, and pointing/gaze target markers.
 *
 * Pure 2-D canvas with a simple orbit camera; draws through a narrow
 * context interface so tests can record draw calls instead of pixels.
 */

import { applyTransform, type Transform, type Vec3 } from "./math.js";
import type { BodyView, EventView, ScreenSpec, ScreenHitView } from "./protocol.js";
import { displayedPose, type ViewState } from "./state.js";

/** The subset of CanvasRenderingContext2D the renderer uses. */
export interface Canvas2DLike {
  fillStyle: string | CanvasGradient | CanvasPattern;
  strokeStyle: string | CanvasGradient | CanvasPattern;
  lineWidth: number;
  font: string;
  beginPath(): void;
  moveTo(x: number, y: number): void;
  lineTo(x: number, y: number): void;
  closePath(): void;
  stroke(): void;
  fill(): void;
  arc(x: number, y: number, r: number, a0: number, a1: number): void;
  fillRect(x: number, y: number, w: number, h: number): void;
  clearRect(x: number, y: number, w: number, h: number): void;
  fillText(text: string, x: number, y: number): void;
}

export interface OrbitCamera {
  target: Vec3;
  yawRad: number;
  pitchRad: number;
  distance: number;
  focalPx: number;
}

export function defaultCamera(): OrbitCamera {
  return { target: [1.0, 0.9, 1.5], yawRad: 2.6, pitchRad: -0.35,
           distance: 5.5, focalPx: 700 };
}

/** World point -> canvas [x, y, depth]; null when behind the camera. */
export function projectPoint(camera: OrbitCamera, width: number, height: number,
                             p: Vec3): [number, number, number] | null {
  const sy = Math.sin(camera.yawRad), cy = Math.cos(camera.yawRad);
  const sp = Math.sin(camera.pitchRad), cp = Math.cos(camera.pitchRad);
  // camera position orbiting the target
  const eye: Vec3 = [
    camera.target[0] + camera.distance * cp * sy,
    camera.target[1] - camera.distance * sp,
    camera.target[2] + camera.distance * cp * cy,
  ];
  const d: Vec3 = [p[0] - eye[0], p[1] - eye[1], p[2] - eye[2]];
  // view basis: forward toward target, x right, y down
  const fwd: Vec3 = [
    (camera.target[0] - eye[0]) / camera.distance,
    (camera.target[1] - eye[1]) / camera.distance,
    (camera.target[2] - eye[2]) / camera.distance,
  ];
  // right = normalize(cross(fwd, worldUp)), worldUp = +y
  const rx = -fwd[2], rz = fwd[0];
  const rn = Math.hypot(rx, rz) || 1;
  const r: Vec3 = [rx / rn, 0, rz / rn];
  const down: Vec3 = [
    fwd[1] * r[2] - fwd[2] * r[1],
    fwd[2] * r[0] - fwd[0] * r[2],
    fwd[0] * r[1] - fwd[1] * r[0],
  ];
  const zc = d[0] * fwd[0] + d[1] * fwd[1] + d[2] * fwd[2];
  if (zc <= 0.05) return null;
  const xc = d[0] * r[0] + d[1] * r[1] + d[2] * r[2];
  const yc = d[0] * down[0] + d[1] * down[1] + d[2] * down[2];
  return [width / 2 + (camera.focalPx * xc) / zc,
          height / 2 + (camera.focalPx * yc) / zc, zc];
}

// bone topology matching the backend's 15-joint order
export const BONES: [number, number][] = [
  [0, 1], [1, 2], [2, 3], [3, 4],
  [2, 5], [5, 6], [6, 7], [7, 8],
  [2, 9], [9, 10], [10, 11], [11, 12],
  [0, 13], [0, 14],
];

const PALETTE = ["#4ec9f5", "#f5a54e", "#8af54e", "#f54e8a", "#b44ef5", "#f5e44e"];

export interface RenderStats {
  screensDrawn: number;
  cloudPointsDrawn: number;
  skeletonsDrawn: number;
  bonesDrawn: number;
  markersDrawn: number;
}

export function renderScene(ctx: Canvas2DLike, width: number, height: number,
                            state: ViewState,
                            camera: OrbitCamera = defaultCamera()): RenderStats {
  const stats: RenderStats = { screensDrawn: 0, cloudPointsDrawn: 0,
                               skeletonsDrawn: 0, bonesDrawn: 0, markersDrawn: 0 };
  ctx.fillStyle = "#101418";
  ctx.fillRect(0, 0, width, height);
  const project = (p: Vec3) => projectPoint(camera, width, height, p);

  if (state.layers.screens) {
    for (const screen of state.screens) {
      if (drawScreen(ctx, project, screen)) stats.screensDrawn += 1;
    }
  }

  if (state.layers.cloud) {
    let sensorIndex = 0;
    for (const sensorId of Object.keys(state.clouds).sort()) {
      const pose = displayedPose(state, sensorId);
      const points = state.clouds[sensorId];
      if (!pose || !points) { sensorIndex += 1; continue; }
      ctx.fillStyle = PALETTE[sensorIndex % PALETTE.length] as string;
      for (let i = 0; i + 2 < points.length; i += 3) {
        const world = applyTransform(pose,
          [points[i] as number, points[i + 1] as number, points[i + 2] as number]);
        const pr = project(world);
        if (pr) {
          ctx.fillRect(pr[0], pr[1], 2, 2);
          stats.cloudPointsDrawn += 1;
        }
      }
      sensorIndex += 1;
    }
  }

  if (state.layers.skeletons) {
    for (const body of state.bodies) {
      if (drawSkeleton(ctx, project, body, stats)) stats.skeletonsDrawn += 1;
    }
  }

  if (state.layers.targets) {
    for (const event of state.events) {
      for (const hit of targetHits(event)) {
        if (drawMarker(ctx, project, hit)) stats.markersDrawn += 1;
      }
    }
  }
  return stats;
}

function drawScreen(ctx: Canvas2DLike,
                    project: (p: Vec3) => [number, number, number] | null,
                    screen: ScreenSpec): boolean {
  const corners: Vec3[] = [];
  for (const [du, dv] of [[0, 0], [1, 0], [1, 1], [0, 1]] as [number, number][]) {
    corners.push([
      screen.origin[0] + du * screen.width * screen.u_axis[0] + dv * screen.height * screen.v_axis[0],
      screen.origin[1] + du * screen.width * screen.u_axis[1] + dv * screen.height * screen.v_axis[1],
      screen.origin[2] + du * screen.width * screen.u_axis[2] + dv * screen.height * screen.v_axis[2],
    ]);
  }
  const projected = corners.map(project);
  if (projected.some((p) => p === null)) return false;
  ctx.strokeStyle = "#2d5fa8";
  ctx.lineWidth = 2;
  ctx.beginPath();
  const pts = projected as [number, number, number][];
  const first = pts[0] as [number, number, number];
  ctx.moveTo(first[0], first[1]);
  for (let i = 1; i < pts.length; i++) {
    const p = pts[i] as [number, number, number];
    ctx.lineTo(p[0], p[1]);
  }
  ctx.closePath();
  ctx.stroke();
  ctx.fillText(screen.id, first[0] + 4, first[1] - 4);
  return true;
}

function drawSkeleton(ctx: Canvas2DLike,
                      project: (p: Vec3) => [number, number, number] | null,
                      body: BodyView, stats: RenderStats): boolean {
  const colour = PALETTE[body.person_id % PALETTE.length] as string;
  ctx.strokeStyle = colour;
  ctx.fillStyle = colour;
  ctx.lineWidth = 2;
  let drewAny = false;
  for (const [a, b] of BONES) {
    const ca = body.confidences[a] ?? 0;
    const cb = body.confidences[b] ?? 0;
    if (ca < 1 || cb < 1) continue;
    const pa = project(body.joints[a] as Vec3);
    const pb = project(body.joints[b] as Vec3);
    if (!pa || !pb) continue;
    ctx.beginPath();
    ctx.moveTo(pa[0], pa[1]);
    ctx.lineTo(pb[0], pb[1]);
    ctx.stroke();
    stats.bonesDrawn += 1;
    drewAny = true;
  }
  const head = project(body.joints[4] as Vec3);
  if (head) {
    const label = body.identity ?? `#${body.person_id}`;
    ctx.fillText(`${label} (${body.contributors.length} cam)`, head[0] + 6, head[1] - 6);
  }
  return drewAny;
}

function targetHits(event: EventView): ScreenHitView[] {
  const hits: ScreenHitView[] = [];
  if (event.pointing.left) hits.push(event.pointing.left);
  if (event.pointing.right) hits.push(event.pointing.right);
  if (event.gaze) hits.push(event.gaze);
  return hits;
}

function drawMarker(ctx: Canvas2DLike,
                    project: (p: Vec3) => [number, number, number] | null,
                    hit: ScreenHitView): boolean {
  const p = project(hit.point);
  if (!p) return false;
  ctx.strokeStyle = "#f5e44e";
  ctx.lineWidth = 1.5;
  ctx.beginPath();
  ctx.arc(p[0], p[1], 6, 0, Math.PI * 2);
  ctx.stroke();
  ctx.beginPath();
  ctx.moveTo(p[0] - 9, p[1]);
  ctx.lineTo(p[0] + 9, p[1]);
  ctx.moveTo(p[0], p[1] - 9);
  ctx.lineTo(p[0], p[1] + 9);
  ctx.stroke();
  return true;
}
