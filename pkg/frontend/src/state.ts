/** View state and the frame reducer.
 *
 * Invariants: pose edits stay local until explicitly submitted (the server
 * pose is only replaced by pose frames), and every displayed residual
 * carries the timestamp of the cloud it was computed from. All pipeline
 * state lives server-side; this store only mirrors frames.
 */

import type { Transform } from "./math.js";
import type {
  BodyView,
  EventView,
  GatewayFrame,
  RefineReportFrame,
  ScreenSpec,
} from "./protocol.js";

export interface ResidualView {
  rmseM: number | null;
  sampleCount: number;
  tsUs: number | null;
}

export interface LayerToggles {
  cloud: boolean;
  screens: boolean;
  skeletons: boolean;
  targets: boolean;
}

export interface ViewState {
  connection: "connecting" | "open" | "closed";
  screens: ScreenSpec[];
  poses: Record<string, Transform>;          // server-confirmed
  pendingEdits: Record<string, Transform>;   // local, not yet submitted
  residuals: Record<string, ResidualView>;
  clouds: Record<string, Float32Array>;
  bodies: BodyView[];
  events: EventView[];
  lastTickUs: number | null;
  refineReports: RefineReportFrame[];
  acks: { cmd: string; path?: string }[];
  errors: string[];
  layers: LayerToggles;
}

export function initialState(): ViewState {
  return {
    connection: "connecting",
    screens: [],
    poses: {},
    pendingEdits: {},
    residuals: {},
    clouds: {},
    bodies: [],
    events: [],
    lastTickUs: null,
    refineReports: [],
    acks: [],
    errors: [],
    layers: { cloud: true, screens: true, skeletons: true, targets: true },
  };
}

export function applyFrame(state: ViewState, frame: GatewayFrame): ViewState {
  switch (frame.type) {
    case "scene":
      return { ...state, screens: frame.screens };
    case "pose": {
      const poses = { ...state.poses, [frame.sensor_id]: {
        rotation: frame.rotation, translation: frame.translation } };
      return { ...state, poses };
    }
    case "residual": {
      const residuals = { ...state.residuals, [frame.sensor_id]: {
        rmseM: frame.rmse_m, sampleCount: frame.sample_count,
        tsUs: frame.ts_us ?? null } };
      return { ...state, residuals };
    }
    case "cloud": {
      const clouds = { ...state.clouds, [frame.sensor_id]: frame.points };
      return { ...state, clouds };
    }
    case "bodies":
      return { ...state, bodies: frame.bodies, lastTickUs: frame.ts_us };
    case "events":
      return { ...state, events: frame.events, lastTickUs: frame.ts_us };
    case "refine_report":
      return { ...state, refineReports: [...state.refineReports, frame] };
    case "ack":
      return { ...state, acks: [...state.acks, { cmd: frame.cmd, path: frame.path }] };
    case "error":
      return { ...state, errors: [...state.errors, frame.message] };
    default:
      return state;
  }
}

/** Stage a local pose edit; nothing is sent until submitEdit. */
export function stageEdit(state: ViewState, sensorId: string,
                          pose: Transform): ViewState {
  return { ...state, pendingEdits: { ...state.pendingEdits, [sensorId]: pose } };
}

export function discardEdit(state: ViewState, sensorId: string): ViewState {
  const pendingEdits = { ...state.pendingEdits };
  delete pendingEdits[sensorId];
  return { ...state, pendingEdits };
}

/** The pose the UI should display/render for a sensor: the staged edit when
 * one exists, else the server-confirmed pose. */
export function displayedPose(state: ViewState, sensorId: string): Transform | null {
  return state.pendingEdits[sensorId] ?? state.poses[sensorId] ?? null;
}

export function setConnection(state: ViewState,
                              connection: ViewState["connection"]): ViewState {
  return { ...state, connection };
}

export function toggleLayer(state: ViewState, layer: keyof LayerToggles): ViewState {
  return { ...state, layers: { ...state.layers, [layer]: !state.layers[layer] } };
}
