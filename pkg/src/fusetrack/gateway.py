"""WebSocket gateway for UI clients: live state out, calibration commands in.

Outbound frames are JSON text; downsampled point clouds travel as binary
side-channel frames ("PC01" + u16 LE sensor-id length + sensor id UTF-8 +
count-prefixed float32 triplets, see pointcloud serialization). Inbound
commands are JSON objects with a "cmd" key; a malformed command earns an
error frame and the connection stays open.

All pipeline state lives server-side; the UI can disconnect and reconnect
without affecting a run.
"""

from __future__ import annotations

import json
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from websockets.sync.server import serve
from websockets.exceptions import ConnectionClosed

from .calibration import (
    CalibrationSet,
    SceneModel,
    alignment_residual,
    build_calibration,
    refine_scene_pose,
    save_calibration,
    scene_to_doc,
)
from .geometry import RigidTransform, vec3
from .pointcloud import IcpParams, IcpResult, PointCloud

CLOUD_FRAME_MAGIC = b"PC01"
MAX_UI_CLOUD_POINTS = 20_000


def transform_to_json(t: RigidTransform) -> dict:
    q = t.rotation
    v = t.translation
    return {"rotation": {"w": float(q[0]), "x": float(q[1]),
                         "y": float(q[2]), "z": float(q[3])},
            "translation": {"x": float(v[0]), "y": float(v[1]), "z": float(v[2])}}


def transform_from_json(doc: dict) -> RigidTransform:
    r = doc["rotation"]
    v = doc["translation"]
    return RigidTransform(
        np.array([float(r["w"]), float(r["x"]), float(r["y"]), float(r["z"])]),
        vec3(float(v["x"]), float(v["y"]), float(v["z"])))


def encode_cloud_frame(sensor_id: str, cloud: PointCloud) -> bytes:
    if len(cloud) > MAX_UI_CLOUD_POINTS:
        stride = int(np.ceil(len(cloud) / MAX_UI_CLOUD_POINTS))
        cloud = PointCloud(cloud.points[::stride])
    sid = sensor_id.encode("utf-8")
    return CLOUD_FRAME_MAGIC + struct.pack("<H", len(sid)) + sid + cloud.to_bytes()


@dataclass
class CalibrationSession:
    """Server-side state for the human-in-the-loop calibration workflow:
    per-sensor pose being edited, the latest cloud, and residual scoring."""

    scene: SceneModel
    main_sensor_id: str
    poses: dict[str, RigidTransform] = field(default_factory=dict)
    clouds: dict[str, PointCloud] = field(default_factory=dict)
    icp_params: IcpParams = field(default_factory=lambda: IcpParams(
        reject_threshold=0.3, epsilon=1e-8, max_iterations=80))
    cloud_timestamps: dict[str, int] = field(default_factory=dict)

    def set_pose(self, sensor_id: str, pose: RigidTransform) -> None:
        self.poses[sensor_id] = pose

    def set_cloud(self, sensor_id: str, cloud: PointCloud) -> None:
        self.clouds[sensor_id] = cloud

    def residual(self, sensor_id: str) -> tuple[float, int]:
        if sensor_id not in self.clouds or sensor_id not in self.poses:
            return float("inf"), 0
        return alignment_residual(self.clouds[sensor_id], self.poses[sensor_id],
                                  self.scene)

    def refine(self, sensor_id: str) -> IcpResult:
        result = refine_scene_pose(self.clouds[sensor_id], self.poses[sensor_id],
                                   self.scene, params=self.icp_params)
        self.poses[sensor_id] = result.transform
        return result

    def calibration_set(self) -> CalibrationSet:
        """Current poses folded into a calibration: scene pose of the main
        sensor plus main_from_sensor chains for the rest."""
        world_from_main = self.poses[self.main_sensor_id]
        edges = []
        for sensor_id, pose in sorted(self.poses.items()):
            if sensor_id == self.main_sensor_id:
                continue
            edges.append((self.main_sensor_id, sensor_id,
                          world_from_main.inverse().compose(pose)))
        residuals = {s: self.residual(s)[0] for s in self.poses
                     if np.isfinite(self.residual(s)[0])}
        return build_calibration(self.main_sensor_id, world_from_main, edges,
                                 residuals=residuals)

    def save(self, path: str | Path) -> None:
        save_calibration(self.calibration_set(), path)


class GatewayServer:
    """Thread-based WebSocket fan-out with calibration command handling.

    `controls` may provide callbacks for run control commands:
    {"select_scenario": fn(name), "start": fn(), "stop": fn()}.
    """

    def __init__(self, host: str = "127.0.0.1", port: int = 0,
                 session: CalibrationSession | None = None,
                 controls: dict | None = None,
                 save_dir: str | Path | None = None):
        self.session = session
        self.controls = controls or {}
        self.save_dir = Path(save_dir) if save_dir is not None else None
        self._clients: set = set()
        self._lock = threading.Lock()
        self._server = serve(self._handle_client, host, port)
        self.port = self._server.socket.getsockname()[1]
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)

    def start(self) -> "GatewayServer":
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        with self._lock:
            clients = list(self._clients)
        for conn in clients:
            try:
                conn.close()
            except Exception:
                pass

    # -- outbound ---------------------------------------------------------

    def broadcast_json(self, obj: dict) -> None:
        self._broadcast(json.dumps(obj, sort_keys=True))

    def broadcast_cloud(self, sensor_id: str, cloud: PointCloud) -> None:
        self._broadcast(encode_cloud_frame(sensor_id, cloud))

    def _broadcast(self, frame) -> None:
        with self._lock:
            clients = list(self._clients)
        for conn in clients:
            try:
                conn.send(frame)
            except Exception:
                self._drop(conn)

    def _drop(self, conn) -> None:
        with self._lock:
            self._clients.discard(conn)

    # -- inbound ----------------------------------------------------------

    def _handle_client(self, conn) -> None:
        with self._lock:
            self._clients.add(conn)
        try:
            self._send_hello(conn)
            for message in conn:
                if isinstance(message, bytes):
                    conn.send(json.dumps(
                        {"type": "error", "message": "binary commands not supported"}))
                    continue
                try:
                    reply_frames = self._handle_command(message)
                except Exception as exc:
                    reply_frames = [{"type": "error", "message": str(exc)}]
                for frame in reply_frames:
                    conn.send(json.dumps(frame, sort_keys=True))
        except ConnectionClosed:
            pass
        finally:
            self._drop(conn)

    def _send_hello(self, conn) -> None:
        if self.session is not None:
            conn.send(json.dumps(
                {"type": "scene", **scene_to_doc(self.session.scene)}, sort_keys=True))
            for sensor_id in sorted(self.session.poses):
                conn.send(json.dumps(self._pose_frame(sensor_id), sort_keys=True))
                conn.send(json.dumps(self._residual_frame(sensor_id), sort_keys=True))
            for sensor_id in sorted(self.session.clouds):
                conn.send(encode_cloud_frame(sensor_id, self.session.clouds[sensor_id]))

    def _pose_frame(self, sensor_id: str) -> dict:
        return {"type": "pose", "sensor_id": sensor_id,
                **transform_to_json(self.session.poses[sensor_id])}

    def _residual_frame(self, sensor_id: str) -> dict:
        rmse, count = self.session.residual(sensor_id)
        return {"type": "residual", "sensor_id": sensor_id,
                "rmse_m": (None if not np.isfinite(rmse) else float(rmse)),
                "sample_count": int(count),
                "ts_us": self.session.cloud_timestamps.get(sensor_id)}

    def _handle_command(self, message: str) -> list[dict]:
        try:
            cmd = json.loads(message)
        except json.JSONDecodeError as exc:
            return [{"type": "error", "message": f"malformed JSON: {exc}"}]
        if not isinstance(cmd, dict) or "cmd" not in cmd:
            return [{"type": "error", "message": "command must be a JSON object with 'cmd'"}]
        name = cmd["cmd"]

        if name == "set_camera_pose":
            if self.session is None:
                return [{"type": "error", "message": "no calibration session"}]
            sensor_id = cmd["sensor_id"]
            if sensor_id not in self.session.poses:
                return [{"type": "error", "message": f"unknown sensor {sensor_id!r}"}]
            self.session.set_pose(sensor_id, transform_from_json(cmd))
            return [{"type": "ack", "cmd": name, "sensor_id": sensor_id},
                    self._pose_frame(sensor_id),
                    self._residual_frame(sensor_id)]

        if name == "run_refine":
            if self.session is None:
                return [{"type": "error", "message": "no calibration session"}]
            sensor_id = cmd.get("sensor_id", self.session.main_sensor_id)
            before, _ = self.session.residual(sensor_id)
            result = self.session.refine(sensor_id)
            after, _ = self.session.residual(sensor_id)
            return [{"type": "refine_report", "sensor_id": sensor_id,
                     "rmse_before": (None if not np.isfinite(before) else float(before)),
                     "rmse_after": (None if not np.isfinite(after) else float(after)),
                     "icp_rmse": float(result.rmse),
                     "iterations": int(result.iterations),
                     "converged": bool(result.converged),
                     "trace": [float(x) for x in result.trace]},
                    self._pose_frame(sensor_id),
                    self._residual_frame(sensor_id)]

        if name == "save_calibration":
            if self.session is None:
                return [{"type": "error", "message": "no calibration session"}]
            path = Path(cmd.get("path", "calibration.yaml"))
            if not path.is_absolute() and self.save_dir is not None:
                path = self.save_dir / path
            self.session.save(path)
            return [{"type": "ack", "cmd": name, "path": str(path)}]

        if name in ("select_scenario", "start", "stop"):
            handler = self.controls.get(name)
            if handler is None:
                return [{"type": "error", "message": f"{name} not available"}]
            if name == "select_scenario":
                handler(cmd.get("name", ""))
            else:
                handler()
            return [{"type": "ack", "cmd": name}]

        return [{"type": "error", "message": f"unknown command {name!r}"}]


def bodies_frame(tick_us: int, bodies) -> dict:
    return {
        "type": "bodies",
        "ts_us": int(tick_us),
        "bodies": [
            {
                "person_id": int(b.person_id),
                "identity": b.identity_label,
                "joints": [[float(x) for x in p] for p in b.positions],
                "confidences": [int(c) for c in b.confidences],
                "contributors": [list(c) for c in b.contributors],
            }
            for b in bodies
        ],
    }


def events_frame(tick_us: int, events) -> dict:
    return {
        "type": "events",
        "ts_us": int(tick_us),
        "events": [json.loads(e.to_json()) for e in events],
    }
