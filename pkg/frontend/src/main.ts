/** Browser entry: connect to the gateway, keep the view state in sync, and
 * drive the canvas + control panel. */

import { GatewayClient } from "./protocol.js";
import { buildPanel } from "./panel.js";
import { defaultCamera, renderScene } from "./render.js";
import { applyFrame, initialState, setConnection, type ViewState } from "./state.js";

function gatewayUrl(): string {
  const fromQuery = new URLSearchParams(window.location.search).get("ws");
  return fromQuery ?? `ws://${window.location.hostname || "127.0.0.1"}:8765`;
}

function start(): void {
  const canvas = document.getElementById("view") as HTMLCanvasElement;
  const panelRoot = document.getElementById("panel") as HTMLElement;
  const ctx = canvas.getContext("2d");
  if (!ctx) throw new Error("no 2d canvas context");

  let state: ViewState = initialState();
  const camera = defaultCamera();
  const client = new GatewayClient(gatewayUrl());

  const host = {
    getState: () => state,
    setState: (next: ViewState) => { state = next; refreshPanel(); },
    client,
  };
  let refreshPanel = buildPanel(panelRoot, host);

  client.onOpen = () => { state = setConnection(state, "open"); refreshPanel(); };
  client.onClose = () => { state = setConnection(state, "closed"); refreshPanel(); };
  client.onFrame = (frame) => {
    state = applyFrame(state, frame);
    if (frame.type === "pose" || frame.type === "residual"
        || frame.type === "error" || frame.type === "ack"
        || frame.type === "refine_report" || frame.type === "scene") {
      refreshPanel();
    }
  };

  // drag to orbit, wheel to zoom
  let dragging = false;
  let last: [number, number] = [0, 0];
  canvas.onmousedown = (ev) => { dragging = true; last = [ev.clientX, ev.clientY]; };
  window.onmouseup = () => { dragging = false; };
  window.onmousemove = (ev) => {
    if (!dragging) return;
    camera.yawRad += (ev.clientX - last[0]) * 0.008;
    camera.pitchRad = Math.max(-1.4, Math.min(1.4,
      camera.pitchRad + (ev.clientY - last[1]) * 0.008));
    last = [ev.clientX, ev.clientY];
  };
  canvas.onwheel = (ev) => {
    camera.distance = Math.max(0.5, Math.min(20,
      camera.distance * (ev.deltaY > 0 ? 1.1 : 0.9)));
    ev.preventDefault();
  };

  const frame = () => {
    canvas.width = canvas.clientWidth;
    canvas.height = canvas.clientHeight;
    renderScene(ctx, canvas.width, canvas.height, state, camera);
    requestAnimationFrame(frame);
  };
  requestAnimationFrame(frame);
}

window.addEventListener("DOMContentLoaded", start);
