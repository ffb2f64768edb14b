/** Calibration control panel: numeric pose steppers (primary input, for
 * reproducible values), refine/save buttons, residual readout, layer
 * toggles. Plain DOM, no framework.
 */

import {
  nudgeRotation,
  nudgeTranslation,
  type Transform,
  type Vec3,
} from "./math.js";
import type { GatewayClient } from "./protocol.js";
import {
  discardEdit,
  displayedPose,
  stageEdit,
  toggleLayer,
  type LayerToggles,
  type ViewState,
} from "./state.js";

const STEP_M = 0.01;
const STEP_RAD = 0.5 * (Math.PI / 180);

export interface PanelHost {
  getState(): ViewState;
  setState(next: ViewState): void;
  client: GatewayClient;
}

export function buildPanel(root: HTMLElement, host: PanelHost): () => void {
  root.innerHTML = "";
  const status = el("div", "status");
  const sensorBox = el("div", "sensors");
  const layersBox = el("div", "layers");
  root.append(status, sensorBox, layersBox);

  for (const layer of ["cloud", "screens", "skeletons", "targets"] as (keyof LayerToggles)[]) {
    const label = el("label");
    const box = document.createElement("input");
    box.type = "checkbox";
    box.checked = host.getState().layers[layer];
    box.onchange = () => host.setState(toggleLayer(host.getState(), layer));
    label.append(box, document.createTextNode(` ${layer}`));
    layersBox.append(label);
  }

  const render = () => {
    const state = host.getState();
    status.textContent =
      `gateway: ${state.connection}` +
      (state.errors.length ? ` | last error: ${state.errors[state.errors.length - 1]}` : "");
    syncSensors(sensorBox, state, host);
  };
  render();
  return render;
}

function syncSensors(box: HTMLElement, state: ViewState, host: PanelHost): void {
  box.innerHTML = "";
  for (const sensorId of Object.keys(state.poses).sort()) {
    const pose = displayedPose(state, sensorId);
    if (!pose) continue;
    const card = el("fieldset", "sensor");
    const legend = document.createElement("legend");
    legend.textContent = sensorId;
    card.append(legend);

    const residual = state.residuals[sensorId];
    const readout = el("div", "residual");
    if (residual && residual.rmseM !== null) {
      readout.textContent =
        `residual ${(residual.rmseM * 1000).toFixed(2)} mm over ` +
        `${residual.sampleCount} pts` +
        (residual.tsUs !== null ? ` @ t=${(residual.tsUs / 1e6).toFixed(2)}s` : "");
    } else {
      readout.textContent = "residual: no qualifying cloud points";
    }
    card.append(readout);

    const pending = sensorId in state.pendingEdits;
    const t = pose.translation;
    const poseLine = el("div", "pose");
    poseLine.textContent =
      `t = (${t.x.toFixed(3)}, ${t.y.toFixed(3)}, ${t.z.toFixed(3)})` +
      (pending ? " [edited]" : "");
    card.append(poseLine);

    const axes: [string, Vec3][] = [["x", [1, 0, 0]], ["y", [0, 1, 0]], ["z", [0, 0, 1]]];
    for (const [name, axis] of axes) {
      card.append(
        stepper(`${name} +`, () => edit(host, sensorId,
          (p) => nudgeTranslation(p, [axis[0] * STEP_M, axis[1] * STEP_M, axis[2] * STEP_M]))),
        stepper(`${name} -`, () => edit(host, sensorId,
          (p) => nudgeTranslation(p, [-axis[0] * STEP_M, -axis[1] * STEP_M, -axis[2] * STEP_M]))),
        stepper(`r${name} +`, () => edit(host, sensorId,
          (p) => nudgeRotation(p, axis, STEP_RAD))),
        stepper(`r${name} -`, () => edit(host, sensorId,
          (p) => nudgeRotation(p, axis, -STEP_RAD))),
      );
    }

    card.append(
      button("submit pose", () => {
        const staged = displayedPose(host.getState(), sensorId);
        if (staged) host.client.setCameraPose(sensorId, staged);
        host.setState(discardEdit(host.getState(), sensorId));
      }),
      button("discard", () => host.setState(discardEdit(host.getState(), sensorId))),
      button("refine (ICP)", () => host.client.runRefine(sensorId)),
    );
    box.append(card);
  }
  box.append(button("save calibration", () =>
    host.client.saveCalibration("calibration.yaml")));
}

function edit(host: PanelHost, sensorId: string,
              f: (p: Transform) => Transform): void {
  const state = host.getState();
  const pose = displayedPose(state, sensorId);
  if (pose) host.setState(stageEdit(state, sensorId, f(pose)));
}

function el(tag: string, className?: string): HTMLElement {
  const node = document.createElement(tag);
  if (className) node.className = className;
  return node;
}

function button(label: string, onClick: () => void): HTMLElement {
  const b = document.createElement("button");
  b.textContent = label;
  b.onclick = onClick;
  return b;
}

function stepper(label: string, onClick: () => void): HTMLElement {
  const b = button(label, onClick);
  b.className = "step";
  return b;
}
