/** Gateway protocol: frame parsing and command encoding.
 *
 * Wire contract (see the backend's docs/formats.md): text frames are JSON
 * objects tagged by "type"; binary frames carry a downsampled point cloud
 * as "PC01" + u16 LE id length + sensor id + u32 LE count + f32 LE xyz
 * triplets. Commands are JSON objects tagged by "cmd".
 */

import type { Transform, Vec3 } from "./math.js";

export interface ScreenSpec {
  id: string;
  origin: Vec3;
  u_axis: Vec3;
  v_axis: Vec3;
  width: number;
  height: number;
  pixels: [number, number];
}

export interface SceneFrame {
  type: "scene";
  screens: ScreenSpec[];
}

export interface PoseFrame extends Transform {
  type: "pose";
  sensor_id: string;
}

export interface ResidualFrame {
  type: "residual";
  sensor_id: string;
  rmse_m: number | null;
  sample_count: number;
  ts_us: number | null;
}

export interface BodyView {
  person_id: number;
  identity: string | null;
  joints: Vec3[];
  confidences: number[];
  contributors: [string, number][];
}

export interface BodiesFrame {
  type: "bodies";
  ts_us: number;
  bodies: BodyView[];
}

export interface ScreenHitView {
  screen: string;
  u: number;
  v: number;
  px: number;
  py: number;
  point: Vec3;
}

export interface EventView {
  person_id: number;
  ts_us: number;
  pointing: { left: ScreenHitView | null; right: ScreenHitView | null };
  gaze: ScreenHitView | null;
  gesture: { left: [string, number] | null; right: [string, number] | null };
  identity: [string, number] | null;
}

export interface EventsFrame {
  type: "events";
  ts_us: number;
  events: EventView[];
}

export interface RefineReportFrame {
  type: "refine_report";
  sensor_id: string;
  rmse_before: number | null;
  rmse_after: number | null;
  icp_rmse: number;
  iterations: number;
  converged: boolean;
  trace: number[];
}

export interface AckFrame {
  type: "ack";
  cmd: string;
  path?: string;
  sensor_id?: string;
}

export interface ErrorFrame {
  type: "error";
  message: string;
}

export interface CloudFrame {
  type: "cloud";
  sensor_id: string;
  points: Float32Array; // xyz triplets, sensor frame
}

export type GatewayFrame =
  | SceneFrame
  | PoseFrame
  | ResidualFrame
  | BodiesFrame
  | EventsFrame
  | RefineReportFrame
  | AckFrame
  | ErrorFrame
  | CloudFrame;

const KNOWN_TYPES = new Set([
  "scene", "pose", "residual", "bodies", "events",
  "refine_report", "ack", "error",
]);

export class ProtocolError extends Error {}

export function parseTextFrame(text: string): GatewayFrame {
  let obj: unknown;
  try {
    obj = JSON.parse(text);
  } catch (exc) {
    throw new ProtocolError(`frame is not JSON: ${exc}`);
  }
  if (typeof obj !== "object" || obj === null || !("type" in obj)) {
    throw new ProtocolError("frame has no type tag");
  }
  const frame = obj as { type: string };
  if (!KNOWN_TYPES.has(frame.type)) {
    throw new ProtocolError(`unknown frame type ${frame.type}`);
  }
  return frame as GatewayFrame;
}

const CLOUD_MAGIC = [0x50, 0x43, 0x30, 0x31]; // "PC01"

export function parseCloudFrame(buffer: ArrayBuffer): CloudFrame {
  const view = new DataView(buffer);
  if (buffer.byteLength < 6) throw new ProtocolError("cloud frame too short");
  for (let i = 0; i < 4; i++) {
    if (view.getUint8(i) !== CLOUD_MAGIC[i]) {
      throw new ProtocolError("bad cloud frame magic");
    }
  }
  const idLen = view.getUint16(4, true);
  const idBytes = new Uint8Array(buffer, 6, idLen);
  const sensorId = new TextDecoder().decode(idBytes);
  let offset = 6 + idLen;
  if (buffer.byteLength < offset + 4) throw new ProtocolError("cloud frame truncated");
  const count = view.getUint32(offset, true);
  offset += 4;
  if (buffer.byteLength < offset + count * 12) {
    throw new ProtocolError("cloud frame payload truncated");
  }
  // copy: the float32 view needs 4-byte alignment which the id may break
  const bytes = new Uint8Array(buffer, offset, count * 12).slice();
  return { type: "cloud", sensor_id: sensorId, points: new Float32Array(bytes.buffer) };
}

// -- commands ---------------------------------------------------------------

export function setCameraPoseCommand(sensorId: string, pose: Transform): string {
  return JSON.stringify({
    cmd: "set_camera_pose",
    sensor_id: sensorId,
    rotation: pose.rotation,
    translation: pose.translation,
  });
}

export function runRefineCommand(sensorId: string): string {
  return JSON.stringify({ cmd: "run_refine", sensor_id: sensorId });
}

export function saveCalibrationCommand(path: string): string {
  return JSON.stringify({ cmd: "save_calibration", path });
}

// -- client -----------------------------------------------------------------

/** WebSocket-ish subset the client needs (native browser WebSocket and the
 * `ws` package both satisfy it). */
export interface SocketLike {
  binaryType: string;
  onopen: ((ev?: unknown) => void) | null;
  onclose: ((ev?: unknown) => void) | null;
  onmessage: ((ev: { data: unknown }) => void) | null;
  send(data: string): void;
  close(): void;
}

export type SocketFactory = (url: string) => SocketLike;

export class GatewayClient {
  private socket: SocketLike;
  onFrame: ((frame: GatewayFrame) => void) | null = null;
  onOpen: (() => void) | null = null;
  onClose: (() => void) | null = null;

  constructor(url: string, factory?: SocketFactory) {
    const make: SocketFactory =
      factory ?? ((u) => new (globalThis as any).WebSocket(u) as SocketLike);
    this.socket = make(url);
    this.socket.binaryType = "arraybuffer";
    this.socket.onopen = () => this.onOpen?.();
    this.socket.onclose = () => this.onClose?.();
    this.socket.onmessage = (ev) => {
      const frame = decodeMessage(ev.data);
      if (frame !== null) this.onFrame?.(frame);
    };
  }

  setCameraPose(sensorId: string, pose: Transform): void {
    this.socket.send(setCameraPoseCommand(sensorId, pose));
  }

  runRefine(sensorId: string): void {
    this.socket.send(runRefineCommand(sensorId));
  }

  saveCalibration(path: string): void {
    this.socket.send(saveCalibrationCommand(path));
  }

  close(): void {
    this.socket.close();
  }
}

/** Raw socket payload (string or binary) to a frame; null for unparseable
 * data (the UI must never die on a bad frame). */
export function decodeMessage(data: unknown): GatewayFrame | null {
  try {
    if (typeof data === "string") return parseTextFrame(data);
    if (data instanceof ArrayBuffer) return parseCloudFrame(data);
    if (ArrayBuffer.isView(data)) {
      const view = data as ArrayBufferView;
      const copy = new Uint8Array(view.buffer, view.byteOffset, view.byteLength).slice();
      return parseCloudFrame(copy.buffer);
    }
  } catch {
    return null;
  }
  return null;
}
