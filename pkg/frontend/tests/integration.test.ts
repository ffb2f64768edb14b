/** End-to-end acceptance: a scripted calibration session against the real
 * backend gateway (scripted 5 cm pose error -> nudge, refine, save ->
 * residual under 5 mm and a calibration file the backend can load), plus
 * live rendering of the three-person / two-sensor / one-occluder scenario.
 */

import { execFileSync, spawn, type ChildProcess } from "node:child_process";
import { mkdtempSync, rmSync } from "node:fs";
import { tmpdir } from "node:os";
import { join, resolve } from "node:path";
import { afterAll, beforeAll, describe, expect, it } from "vitest";
import WebSocket from "ws";

import { fileURLToPath } from "node:url";

import { nudgeTranslation, type Transform } from "../src/math.js";
import { GatewayClient, type GatewayFrame, type SocketLike } from "../src/protocol.js";
import { renderScene } from "../src/render.js";
import { applyFrame, initialState, type ViewState } from "../src/state.js";
import { fakeContext, makeBody } from "./render.test.js";

const HERE = fileURLToPath(new URL(".", import.meta.url));
const REPO = resolve(HERE, "..", "..");
const SCENE = join(REPO, "scenarios", "scene.yaml");
const PYTHON = process.env.PYTHON ?? "python3";

let work: string;
let children: ChildProcess[] = [];

function py(args: string[]): void {
  execFileSync(PYTHON, ["-m", "fusetrack.cli", ...args],
               { cwd: work, stdio: "pipe" });
}

function spawnRun(args: string[]): Promise<{ proc: ChildProcess; port: number }> {
  const proc = spawn(PYTHON, ["-u", "-m", "fusetrack.cli", "run", ...args],
                     { cwd: work });
  children.push(proc);
  return new Promise((resolvePort, reject) => {
    let buffer = "";
    const timer = setTimeout(() => reject(new Error(`no gateway port: ${buffer}`)), 60_000);
    proc.stdout!.on("data", (chunk: Buffer) => {
      buffer += chunk.toString();
      const match = buffer.match(/gateway listening on ws:\/\/[\d.]+:(\d+)/);
      if (match) {
        clearTimeout(timer);
        resolvePort({ proc, port: Number(match[1]) });
      }
    });
    proc.stderr!.on("data", (chunk: Buffer) => { buffer += chunk.toString(); });
    proc.on("exit", (code) => {
      clearTimeout(timer);
      reject(new Error(`run exited early (${code}): ${buffer}`));
    });
  });
}

const wsFactory = (url: string): SocketLike =>
  new WebSocket(url, { maxPayload: 64 * 1024 * 1024 }) as unknown as SocketLike;

class FrameLog {
  frames: GatewayFrame[] = [];
  state: ViewState = initialState();
  private waiters: { pred: (f: GatewayFrame) => boolean;
                     resolve: (f: GatewayFrame) => void }[] = [];

  push(frame: GatewayFrame): void {
    this.frames.push(frame);
    this.state = applyFrame(this.state, frame);
    this.waiters = this.waiters.filter((w) => {
      if (w.pred(frame)) { w.resolve(frame); return false; }
      return true;
    });
  }

  next(pred: (f: GatewayFrame) => boolean, timeoutMs = 60_000): Promise<GatewayFrame> {
    const already = this.frames.find(pred);
    if (already) return Promise.resolve(already);
    return new Promise((resolveFrame, reject) => {
      const timer = setTimeout(
        () => reject(new Error("timed out waiting for frame")), timeoutMs);
      this.waiters.push({ pred, resolve: (f) => { clearTimeout(timer); resolveFrame(f); } });
    });
  }
}

function connect(port: number): Promise<{ client: GatewayClient; log: FrameLog }> {
  const log = new FrameLog();
  const client = new GatewayClient(`ws://127.0.0.1:${port}`, wsFactory);
  client.onFrame = (f) => log.push(f);
  return new Promise((resolveClient, reject) => {
    const timer = setTimeout(() => reject(new Error("connect timeout")), 30_000);
    client.onOpen = () => { clearTimeout(timer); resolveClient({ client, log }); };
    client.onClose = () => clearTimeout(timer);
  });
}

beforeAll(() => {
  work = mkdtempSync(join(tmpdir(), "fusetrack-ui-"));
  py(["simulate", join(REPO, "scenarios", "calibration.yaml"), join(work, "calib_store")]);
  py(["simulate", join(REPO, "scenarios", "occlusion_short.yaml"), join(work, "occlusion_store")]);
}, 180_000);

afterAll(() => {
  for (const child of children) {
    try { child.kill("SIGKILL"); } catch { /* already gone */ }
  }
  rmSync(work, { recursive: true, force: true });
});

describe("calibration workflow against the live gateway", () => {
  it("nudge, refine, save ends below 5 mm with a loadable calibration file",
     async () => {
    const { port } = await spawnRun([
      "--store", join(work, "calib_store"), "--scene", SCENE,
      "--calib-from-meta", "--gateway-port", "0",
      "--pose-error", "0.05", "--save-dir", work, "--hold-gateway",
    ]);
    const { client, log } = await connect(port);

    // the scripted 5 cm pose error is clearly visible in the residual
    const bad = await log.next((f) => f.type === "residual"
      && f.sensor_id === "camA" && f.rmse_m !== null);
    expect(bad.type).toBe("residual");
    const badRmse = (bad as { rmse_m: number }).rmse_m;
    expect(badRmse).toBeGreaterThan(0.005);

    // scripted nudge: step the pose 10 mm along +y and submit
    const pose = log.state.poses["camA"] as Transform;
    expect(pose).toBeDefined();
    const camAResiduals = () => log.frames.filter(
      (f) => f.type === "residual" && f.sensor_id === "camA").length;
    const n0 = camAResiduals();
    client.setCameraPose("camA", nudgeTranslation(pose, [0, 0.01, 0]));
    await log.next(() => camAResiduals() > n0);
    const nudged = log.frames[log.frames.length - 1];
    expect(log.state.poses["camA"]?.translation.y).toBeCloseTo(
      pose.translation.y + 0.01, 6);
    expect(nudged).toBeDefined();

    // refine: ICP against the virtual screens
    client.runRefine("camA");
    const report = await log.next((f) => f.type === "refine_report");
    if (report.type === "refine_report") {
      expect(report.rmse_after).not.toBeNull();
      expect(report.rmse_after!).toBeLessThan(report.rmse_before!);
      // residual trace from the report decreases monotonically
      for (let i = 1; i < report.trace.length; i++) {
        expect(report.trace[i]!).toBeLessThanOrEqual(report.trace[i - 1]! + 1e-12);
      }
    }
    const final = await log.next((f) => f.type === "residual"
      && f.sensor_id === "camA"
      && f.rmse_m !== null && f.rmse_m < 0.005);
    expect((final as { rmse_m: number }).rmse_m).toBeLessThan(0.005);

    // save and verify the backend can load the file
    client.saveCalibration("ui_calibration.yaml");
    const ack = await log.next((f) => f.type === "ack" && f.cmd === "save_calibration");
    const savedPath = (ack as { path: string }).path;
    const out = execFileSync(PYTHON, ["-c",
      "import sys; from fusetrack.calibration import load_calibration; " +
      "c = load_calibration(sys.argv[1]); print(c.main_sensor_id)",
      savedPath], { cwd: work }).toString().trim();
    expect(out).toBe("camA");

    // the connection stays usable after the whole sequence
    client.runRefine("camA");
    await log.next(() => log.frames.filter(
      (f) => f.type === "refine_report").length >= 2, 30_000);
    client.close();
  }, 180_000);
});

describe("live monitoring of the occlusion scenario", () => {
  it("renders three skeletons (one single-sensor) and target markers",
     async () => {
    const { port } = await spawnRun([
      "--store", join(work, "occlusion_store"), "--scene", SCENE,
      "--calib-from-meta", "--gateway-port", "0", "--speed", "2",
      "--hold-gateway",
    ]);
    const { client, log } = await connect(port);

    await log.next((f) => f.type === "bodies" && f.bodies.length === 3, 120_000);
    await log.next((f) => f.type === "events" && f.events.length > 0, 120_000);

    const ctx = fakeContext();
    const stats = renderScene(ctx, 1280, 720, log.state);
    expect(stats.screensDrawn).toBe(1);
    expect(stats.skeletonsDrawn).toBe(3);
    expect(stats.markersDrawn).toBeGreaterThanOrEqual(1);  // gaze markers

    const singleSensor = log.state.bodies.filter((b) => b.contributors.length === 1);
    const dualSensor = log.state.bodies.filter((b) => b.contributors.length === 2);
    expect(singleSensor).toHaveLength(1);
    expect(dualSensor).toHaveLength(2);
    client.close();
  }, 180_000);
});

describe("renderer sanity on synthetic state (no backend)", () => {
  it("draws the fixture used by the live test", () => {
    let state = initialState();
    state = applyFrame(state, {
      type: "bodies", ts_us: 0,
      bodies: [makeBody(0, [1, 0.9, 2], [["camA", 0]])],
    });
    const stats = renderScene(fakeContext(), 640, 480, state);
    expect(stats.skeletonsDrawn).toBe(1);
  });
});
