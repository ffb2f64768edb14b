"""Synthetic RGB-D sensor harness with analytic ground truth.

Scenarios script persons (piecewise-linear pelvis paths, canonical joint
offsets, pointing/gaze/gesture intervals), sensors (true poses, intrinsics,
time slots), and box occluders. Captures are rendered per sensor at its
schedule slot:

* skeleton samples with per-joint confidence (high = visible, low =
  occluded by a box, none = out of frustum), Gaussian joint noise, and
  per-sensor body ids that reset when a person leaves the frustum;
* tag frames: machine-readable pixel strips at face/hand locations carrying
  ground-truth labels (the recognizer stub decodes these - recognition here
  is a protocol exercise, not vision);
* depth images ray-cast against capsule limbs, occluder boxes and screen
  rectangles, with optional depth noise.

All randomness comes from one seeded generator per sensor, so identical
scripts produce byte-identical envelope streams. Ground truth (true joints,
pointing/gaze targets, gesture labels, visibility) is derived analytically
from the script - never from the pipeline under test.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .calibration import SceneModel, scene_from_doc
from .geometry import CameraIntrinsics, RigidTransform, ScreenRect, vec3
from .skeleton import JOINT_COUNT, Confidence, JointId, Skeleton
from .pointcloud import DepthImage
from .streams import (Envelope, SensorSchedule, SessionWriter, fusion_ticks,
                      skeleton_to_record)

UP = np.array([0.0, 1.0, 0.0])
NEAR_M = 0.05
MAX_RANGE_M = 8.0

TAG_MAGIC = (0xB7, 0x1D, 0xC4, 0xFF)
PART_CODES = {"face": 0, "left_hand": 1, "right_hand": 2}

PELVIS_HEIGHT_FACTOR = 0.53
UPPER_ARM_FACTOR = 0.15
FOREARM_FACTOR = 0.13
HAND_FACTOR = 0.05


class ScenarioError(ValueError):
    pass


class InvalidScriptError(ScenarioError):
    pass


# ---------------------------------------------------------------------------
# script model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SensorSpec:
    sensor_id: str
    pose: RigidTransform            # true world_from_sensor
    intrinsics: CameraIntrinsics
    depth_every: int = 0            # emit depth every Nth capture; 0 = never


@dataclass(frozen=True)
class PointingSpec:
    start_s: float
    end_s: float
    hand: str                       # "left" | "right"
    screen_id: str
    u: float
    v: float


@dataclass(frozen=True)
class GestureSpec:
    start_s: float
    end_s: float
    hand: str
    label: str


@dataclass(frozen=True)
class PersonSpec:
    name: str
    identity: str
    height_m: float = 1.7
    path: tuple[tuple[float, float, float, float], ...] = ()   # (t_s, x, y, z) pelvis
    look_at: tuple[float, float, float] | None = None
    pointing: tuple[PointingSpec, ...] = ()
    gestures: tuple[GestureSpec, ...] = ()


@dataclass(frozen=True, eq=False)
class BoxSpec:
    lo: np.ndarray
    hi: np.ndarray


@dataclass(frozen=True)
class ScenarioScript:
    name: str
    scene: SceneModel
    schedule: SensorSchedule
    sensors: tuple[SensorSpec, ...]
    persons: tuple[PersonSpec, ...]
    occluders: tuple[BoxSpec, ...] = ()
    sigma_joint_m: float = 0.0
    sigma_depth_m: float = 0.0
    duration_s: float = 10.0
    seed: int = 0

    def __post_init__(self):
        ids = [s.sensor_id for s in self.sensors]
        if len(set(ids)) != len(ids):
            raise InvalidScriptError("duplicate sensor ids")
        for s in self.sensors:
            if s.sensor_id not in self.schedule.slots:
                raise InvalidScriptError(f"sensor {s.sensor_id} has no schedule slot")
        names = [p.name for p in self.persons]
        if len(set(names)) != len(names):
            raise InvalidScriptError("duplicate person names")
        for p in self.persons:
            if not p.path:
                raise InvalidScriptError(f"person {p.name} has no path")


# ---------------------------------------------------------------------------
# analytic person pose
# ---------------------------------------------------------------------------

def _piecewise_linear(path, t_s: float) -> np.ndarray:
    if t_s <= path[0][0]:
        return np.array(path[0][1:], dtype=np.float64)
    for (t0, *p0), (t1, *p1) in zip(path, path[1:]):
        if t_s <= t1:
            lam = (t_s - t0) / (t1 - t0) if t1 > t0 else 0.0
            return (1 - lam) * np.array(p0) + lam * np.array(p1)
    return np.array(path[-1][1:], dtype=np.float64)


def _facing(person: PersonSpec, pelvis: np.ndarray, t_s: float) -> np.ndarray:
    if person.look_at is not None:
        d = np.asarray(person.look_at, dtype=np.float64) - pelvis
    else:
        ahead = _piecewise_linear(person.path, t_s + 0.25) - pelvis
        d = ahead if np.linalg.norm(ahead[[0, 2]]) > 1e-6 else np.array([0.0, 0.0, -1.0])
    d = d.copy()
    d[1] = 0.0
    n = np.linalg.norm(d)
    return d / n if n > 1e-9 else np.array([0.0, 0.0, -1.0])


def _active(intervals, t_s: float, hand: str):
    for spec in intervals:
        if spec.hand == hand and spec.start_s <= t_s < spec.end_s:
            return spec
    return None


def person_joints(person: PersonSpec, t_s: float, scene: SceneModel) -> np.ndarray:
    """True world-frame joint positions at time t (no noise)."""
    h = person.height_m
    pelvis = _piecewise_linear(person.path, t_s)
    f = _facing(person, pelvis, t_s)
    left = np.cross(UP, f)
    joints = np.zeros((JOINT_COUNT, 3))

    def place(j: JointId, dl: float, dy: float, df: float) -> None:
        joints[j] = pelvis + dl * h * left + dy * h * UP + df * h * f

    place(JointId.PELVIS, 0.0, 0.0, 0.0)
    place(JointId.SPINE, 0.0, 0.10, 0.0)
    place(JointId.CHEST, 0.0, 0.19, 0.0)
    place(JointId.NECK, 0.0, 0.28, 0.0)
    place(JointId.HEAD, 0.0, 0.35, 0.0)
    place(JointId.LEFT_SHOULDER, 0.11, 0.26, 0.0)
    place(JointId.RIGHT_SHOULDER, -0.11, 0.26, 0.0)
    place(JointId.LEFT_HIP, 0.06, -0.03, 0.0)
    place(JointId.RIGHT_HIP, -0.06, -0.03, 0.0)

    for hand, shoulder, elbow, wrist, hand_j, sign in (
        ("left", JointId.LEFT_SHOULDER, JointId.LEFT_ELBOW,
         JointId.LEFT_WRIST, JointId.LEFT_HAND, 1.0),
        ("right", JointId.RIGHT_SHOULDER, JointId.RIGHT_ELBOW,
         JointId.RIGHT_WRIST, JointId.RIGHT_HAND, -1.0),
    ):
        pointing = _active(person.pointing, t_s, hand)
        if pointing is not None:
            target = scene.screen(pointing.screen_id).point_at(pointing.u, pointing.v)
            d = target - joints[shoulder]
            d = d / np.linalg.norm(d)
            joints[elbow] = joints[shoulder] + UPPER_ARM_FACTOR * h * d
            joints[wrist] = joints[elbow] + FOREARM_FACTOR * h * d
            joints[hand_j] = joints[wrist] + HAND_FACTOR * h * d
        else:
            # arm hanging at the side
            joints[elbow] = joints[shoulder] + sign * 0.02 * h * left - 0.15 * h * UP
            joints[wrist] = joints[elbow] + sign * 0.01 * h * left - 0.13 * h * UP
            joints[hand_j] = joints[wrist] - 0.05 * h * UP
    return joints


def _rect_hit(origin: np.ndarray, direction: np.ndarray, screen: ScreenRect):
    """Independent ray-rectangle solve (ground truth must not reuse the
    pipeline's intersection helper)."""
    A = np.column_stack([direction, -screen.u_axis, -screen.v_axis])
    if abs(np.linalg.det(A)) < 1e-12:
        return None
    t, a, b = np.linalg.solve(A, screen.origin - origin)
    if t <= 0 or not (0 <= a <= screen.width and 0 <= b <= screen.height):
        return None
    return float(t), float(a / screen.width), float(b / screen.height)


def gaze_truth(person: PersonSpec, joints: np.ndarray, scene: SceneModel):
    """(screen_id, u, v, point) the person's forward gaze lands on, or None."""
    head = joints[JointId.HEAD]
    neck = joints[JointId.NECK]
    pelvis = joints[JointId.PELVIS]
    f = np.cross(joints[JointId.LEFT_SHOULDER] - joints[JointId.RIGHT_SHOULDER],
                 neck - pelvis)
    up = head - neck
    up = up / np.linalg.norm(up)
    f = f - np.dot(f, up) * up
    norm = np.linalg.norm(f)
    if norm < 1e-9:
        return None
    f = f / norm
    best = None
    for screen in scene.screens:
        hit = _rect_hit(head, f, screen)
        if hit is not None and (best is None or hit[0] < best[0][0]):
            best = (hit, screen)
    if best is None:
        return None
    (t, u, v), screen = best
    return screen.screen_id, u, v, head + t * f


# ---------------------------------------------------------------------------
# visibility and rendering
# ---------------------------------------------------------------------------

def segment_hits_box(p0: np.ndarray, p1: np.ndarray, lo: np.ndarray,
                     hi: np.ndarray) -> bool:
    """Slab test: does the open segment p0->p1 pass through the box?"""
    d = p1 - p0
    t_lo, t_hi = 0.0, 1.0
    for axis in range(3):
        if abs(d[axis]) < 1e-12:
            if not lo[axis] <= p0[axis] <= hi[axis]:
                return False
            continue
        ta = (lo[axis] - p0[axis]) / d[axis]
        tb = (hi[axis] - p0[axis]) / d[axis]
        if ta > tb:
            ta, tb = tb, ta
        t_lo = max(t_lo, ta)
        t_hi = min(t_hi, tb)
        if t_lo > t_hi:
            return False
    return t_lo < t_hi


def joint_visibility(joints: np.ndarray, sensor: SensorSpec,
                     occluders: tuple[BoxSpec, ...]) -> np.ndarray:
    """Per-joint confidence: high if the sensor sees the joint unobstructed,
    low if a box occludes it, none if outside the frustum."""
    intr = sensor.intrinsics
    cam_from_world = sensor.pose.inverse()
    origin = sensor.pose.translation
    local = cam_from_world.apply(joints)
    conf = np.full(JOINT_COUNT, Confidence.NONE, dtype=np.int8)
    for j in range(JOINT_COUNT):
        z = local[j, 2]
        if z <= NEAR_M or z > MAX_RANGE_M:
            continue
        u = intr.fx * local[j, 0] / z + intr.cx
        v = intr.fy * local[j, 1] / z + intr.cy
        if not (0 <= u < intr.width and 0 <= v < intr.height):
            continue
        blocked = any(segment_hits_box(origin, joints[j], box.lo, box.hi)
                      for box in occluders)
        conf[j] = Confidence.LOW if blocked else Confidence.HIGH
    return conf


BONES = (
    (JointId.PELVIS, JointId.SPINE, 0.10),
    (JointId.SPINE, JointId.CHEST, 0.10),
    (JointId.CHEST, JointId.NECK, 0.08),
    (JointId.NECK, JointId.HEAD, 0.11),
    (JointId.CHEST, JointId.LEFT_SHOULDER, 0.06),
    (JointId.LEFT_SHOULDER, JointId.LEFT_ELBOW, 0.045),
    (JointId.LEFT_ELBOW, JointId.LEFT_WRIST, 0.04),
    (JointId.LEFT_WRIST, JointId.LEFT_HAND, 0.04),
    (JointId.CHEST, JointId.RIGHT_SHOULDER, 0.06),
    (JointId.RIGHT_SHOULDER, JointId.RIGHT_ELBOW, 0.045),
    (JointId.RIGHT_ELBOW, JointId.RIGHT_WRIST, 0.04),
    (JointId.RIGHT_WRIST, JointId.RIGHT_HAND, 0.04),
    (JointId.PELVIS, JointId.LEFT_HIP, 0.08),
    (JointId.PELVIS, JointId.RIGHT_HIP, 0.08),
)


def render_depth(sensor: SensorSpec, person_joints_list: list[np.ndarray],
                 occluders: tuple[BoxSpec, ...], scene: SceneModel) -> np.ndarray:
    """Z-depth image (height, width) float32; 0 where nothing is hit.

    Rays are parameterized so the ray parameter *is* the z-depth: sensor-frame
    directions ((u-cx)/fx, (v-cy)/fy, 1).
    """
    intr = sensor.intrinsics
    us, vs = np.meshgrid(np.arange(intr.width), np.arange(intr.height))
    dirs_cam = np.stack([(us - intr.cx) / intr.fx,
                         (vs - intr.cy) / intr.fy,
                         np.ones_like(us, dtype=np.float64)], axis=-1).reshape(-1, 3)
    rot = sensor.pose
    dirs = rot.apply(dirs_cam) - rot.translation
    origin = sensor.pose.translation
    depth = np.full(len(dirs), np.inf)

    for joints in person_joints_list:
        for a, b, r in BONES:
            depth = np.minimum(depth, _capsule_depth(origin, dirs, joints[a], joints[b], r))
    for box in occluders:
        depth = np.minimum(depth, _box_depth(origin, dirs, box.lo, box.hi))
    for screen in scene.screens:
        depth = np.minimum(depth, _screen_depth(origin, dirs, screen))

    depth[(depth <= NEAR_M) | (depth > MAX_RANGE_M)] = 0.0
    depth[~np.isfinite(depth)] = 0.0
    return depth.reshape(intr.height, intr.width).astype(np.float32)


def _capsule_depth(o, dirs, a, b, radius):
    ab = b - a
    ab_len = np.linalg.norm(ab)
    out = np.full(len(dirs), np.inf)
    if ab_len < 1e-9:
        return np.minimum(out, _sphere_depth(o, dirs, a, radius))
    axis = ab / ab_len
    m = o - a
    d_par = dirs @ axis
    m_par = m @ axis
    d_perp = dirs - d_par[:, None] * axis
    m_perp = m - m_par * axis
    qa = np.einsum("ij,ij->i", d_perp, d_perp)
    qb = 2.0 * (d_perp @ m_perp)
    qc = m_perp @ m_perp - radius * radius
    disc = qb * qb - 4.0 * qa * qc
    ok = (disc >= 0) & (qa > 1e-12)
    s = np.full(len(dirs), np.inf)
    sqrt_disc = np.sqrt(np.where(ok, disc, 0.0))
    s_hit = np.where(ok, (-qb - sqrt_disc) / np.where(qa > 1e-12, 2.0 * qa, 1.0), np.inf)
    with np.errstate(invalid="ignore"):
        proj = m_par + s_hit * d_par
    cyl_ok = ok & (s_hit > NEAR_M) & (proj >= 0.0) & (proj <= ab_len)
    s = np.where(cyl_ok, s_hit, np.inf)
    out = np.minimum(out, s)
    out = np.minimum(out, _sphere_depth(o, dirs, a, radius))
    out = np.minimum(out, _sphere_depth(o, dirs, b, radius))
    return out


def _sphere_depth(o, dirs, center, radius):
    m = o - center
    qa = np.einsum("ij,ij->i", dirs, dirs)
    qb = 2.0 * (dirs @ m)
    qc = m @ m - radius * radius
    disc = qb * qb - 4.0 * qa * qc
    ok = disc >= 0
    sqrt_disc = np.sqrt(np.where(ok, disc, 0.0))
    s = np.where(ok, (-qb - sqrt_disc) / (2.0 * qa), np.inf)
    return np.where(ok & (s > NEAR_M), s, np.inf)


def _box_depth(o, dirs, lo, hi):
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo[None, :] - o[None, :]) / dirs
        t2 = (hi[None, :] - o[None, :]) / dirs
    t_near = np.nanmax(np.minimum(t1, t2), axis=1)
    t_far = np.nanmin(np.maximum(t1, t2), axis=1)
    hit = (t_far >= t_near) & (t_far > NEAR_M)
    s = np.where(t_near > NEAR_M, t_near, t_far)
    return np.where(hit, s, np.inf)


def _screen_depth(o, dirs, screen: ScreenRect):
    n = screen.normal
    denom = dirs @ n
    with np.errstate(divide="ignore", invalid="ignore"):
        s = ((screen.origin - o) @ n) / denom
    hit_pts = o[None, :] + s[:, None] * dirs
    rel = hit_pts - screen.origin
    a = rel @ screen.u_axis
    b = rel @ screen.v_axis
    ok = (np.abs(denom) > 1e-12) & (s > NEAR_M) & \
         (a >= 0) & (a <= screen.width) & (b >= 0) & (b <= screen.height)
    return np.where(ok, s, np.inf)


# ---------------------------------------------------------------------------
# tag frames (synthetic colour stream)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Tag:
    part: str
    label: str
    u: int
    v: int


def encode_strip(label: str, part: str) -> bytes:
    """BGRA pixel strip: magic pixel, header pixel (length, xor checksum,
    part code), then the UTF-8 label packed 4 bytes per pixel."""
    raw = label.encode("utf-8")
    if not raw or len(raw) > 60:
        raise ScenarioError(f"label {label!r} must be 1..60 UTF-8 bytes")
    xor = 0
    for byte in raw:
        xor ^= byte
    padded = raw + bytes(-len(raw) % 4)
    return (bytes(TAG_MAGIC)
            + bytes([len(raw), xor, PART_CODES[part], 0xFF])
            + padded)


@dataclass(frozen=True)
class TagFrame:
    """Stand-in for a colour frame: tag locations instead of pixels.

    crop() rasterizes the requested region to BGRA bytes, stamping the tag
    strips that fall inside - exactly what a real colour crop would hand to
    the recognizers.
    """

    sensor_id: str
    timestamp_us: int
    width: int
    height: int
    tags: tuple[Tag, ...]

    def crop(self, u0: int, v0: int, side: int) -> bytes:
        buf = bytearray(side * side * 4)
        for tag in self.tags:
            strip = encode_strip(tag.label, tag.part)
            n_px = len(strip) // 4
            x_img = tag.u - n_px // 2
            y = tag.v - v0
            if not 0 <= y < side:
                continue
            for i in range(n_px):
                x = x_img + i - u0
                if 0 <= x < side:
                    o = (y * side + x) * 4
                    buf[o:o + 4] = strip[i * 4:(i + 1) * 4]
        return bytes(buf)

    def to_record(self) -> dict:
        return {
            "kind": "tags",
            "sensor_id": self.sensor_id,
            "ts_us": self.timestamp_us,
            "width": self.width,
            "height": self.height,
            "tags": [{"part": t.part, "label": t.label, "u": t.u, "v": t.v}
                     for t in self.tags],
        }

    @staticmethod
    def from_record(r: dict) -> "TagFrame":
        return TagFrame(
            sensor_id=r["sensor_id"],
            timestamp_us=r["ts_us"],
            width=r["width"],
            height=r["height"],
            tags=tuple(Tag(t["part"], t["label"], t["u"], t["v"]) for t in r["tags"]),
        )


# ---------------------------------------------------------------------------
# ground truth
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PersonTruth:
    name: str
    identity: str
    joints: np.ndarray
    visible_by: dict[str, bool]
    pointing: dict[str, tuple[str, float, float, np.ndarray] | None]
    gaze: tuple[str, float, float, np.ndarray] | None
    gestures: dict[str, str | None]


@dataclass(frozen=True, eq=False)
class TickTruth:
    tick_us: int
    persons: dict[str, PersonTruth]


@dataclass
class GroundTruth:
    ticks: list[TickTruth] = field(default_factory=list)

    def at(self, tick_us: int) -> TickTruth | None:
        for t in self.ticks:
            if t.tick_us == tick_us:
                return t
        return None

    def to_records(self):
        for tick in self.ticks:
            persons = {}
            for name, p in tick.persons.items():
                persons[name] = {
                    "identity": p.identity,
                    "joints": p.joints.astype("<f8").tobytes(),
                    "visible_by": {k: bool(v) for k, v in p.visible_by.items()},
                    "pointing": {h: (None if tgt is None else
                                     {"screen": tgt[0], "u": tgt[1], "v": tgt[2],
                                      "point": [float(x) for x in tgt[3]]})
                                 for h, tgt in p.pointing.items()},
                    "gaze": (None if p.gaze is None else
                             {"screen": p.gaze[0], "u": p.gaze[1], "v": p.gaze[2],
                              "point": [float(x) for x in p.gaze[3]]}),
                    "gestures": dict(p.gestures),
                }
            yield {"kind": "truth", "ts_us": tick.tick_us, "persons": persons}

    @staticmethod
    def from_records(records) -> "GroundTruth":
        truth = GroundTruth()
        for r in records:
            persons = {}
            for name, p in r["persons"].items():
                persons[name] = PersonTruth(
                    name=name,
                    identity=p["identity"],
                    joints=np.frombuffer(p["joints"], dtype="<f8").reshape(-1, 3),
                    visible_by=dict(p["visible_by"]),
                    pointing={h: (None if tgt is None else
                                  (tgt["screen"], tgt["u"], tgt["v"], np.array(tgt["point"])))
                              for h, tgt in p["pointing"].items()},
                    gaze=(None if p["gaze"] is None else
                          (p["gaze"]["screen"], p["gaze"]["u"], p["gaze"]["v"],
                           np.array(p["gaze"]["point"]))),
                    gestures={h: g for h, g in p["gestures"].items()},
                )
            truth.ticks.append(TickTruth(tick_us=r["ts_us"], persons=persons))
        return truth


# ---------------------------------------------------------------------------
# scenario execution
# ---------------------------------------------------------------------------

@dataclass
class ScenarioOutput:
    script: ScenarioScript
    streams: dict[str, list[Envelope]]
    truth: GroundTruth

    def all_envelopes(self) -> list[Envelope]:
        merged = [e for envs in self.streams.values() for e in envs]
        merged.sort(key=lambda e: (e.originating_time_us, e.stream_name, e.sequence))
        return merged

    def write_session(self, root) -> None:
        with SessionWriter(root) as writer:
            for env in self.all_envelopes():
                writer.append(env.stream_name, env.originating_time_us, env.payload)
            for record in self.truth.to_records():
                writer.append("truth", record["ts_us"], record)


def _person_truth(script: ScenarioScript, person: PersonSpec, t_s: float,
                  joints: np.ndarray) -> PersonTruth:
    pointing = {}
    for hand in ("left", "right"):
        spec = _active(person.pointing, t_s, hand)
        if spec is None:
            pointing[hand] = None
        else:
            screen = script.scene.screen(spec.screen_id)
            pointing[hand] = (spec.screen_id, spec.u, spec.v,
                              screen.point_at(spec.u, spec.v))
    gestures = {}
    for hand in ("left", "right"):
        spec = _active(person.gestures, t_s, hand)
        gestures[hand] = spec.label if spec is not None else None
    visible = {}
    for sensor in script.sensors:
        conf = joint_visibility(joints, sensor, script.occluders)
        visible[sensor.sensor_id] = bool(conf[JointId.PELVIS] == Confidence.HIGH)
    return PersonTruth(
        name=person.name,
        identity=person.identity,
        joints=joints,
        visible_by=visible,
        pointing=pointing,
        gaze=gaze_truth(person, joints, script.scene),
        gestures=gestures,
    )


def run_scenario(script: ScenarioScript) -> ScenarioOutput:
    duration_us = int(round(script.duration_s * 1e6))
    streams: dict[str, list[Envelope]] = {}
    sequences: dict[str, int] = {}

    def emit(stream: str, ts: int, payload: dict) -> None:
        seq = sequences.get(stream, 0)
        streams.setdefault(stream, []).append(Envelope(stream, ts, seq, payload))
        sequences[stream] = seq + 1

    # self-describing session: schedule + per-sensor intrinsics and the true
    # mount pose as a calibration hint (stands in for rough manual placement)
    emit("meta", 0, {
        "kind": "schedule",
        "period_us": script.schedule.period_us,
        "slots": dict(script.schedule.slots),
    })
    for sensor in script.sensors:
        q = sensor.pose.rotation
        t = sensor.pose.translation
        intr = sensor.intrinsics
        emit("meta", 0, {
            "kind": "sensor_meta",
            "sensor_id": sensor.sensor_id,
            "fx": intr.fx, "fy": intr.fy, "cx": intr.cx, "cy": intr.cy,
            "width": intr.width, "height": intr.height,
            "pose_hint": {
                "rotation": {"w": float(q[0]), "x": float(q[1]),
                             "y": float(q[2]), "z": float(q[3])},
                "translation": {"x": float(t[0]), "y": float(t[1]), "z": float(t[2])},
            },
        })

    for sensor_index, sensor in enumerate(script.sensors):
        rng = np.random.default_rng([script.seed, sensor_index])
        sensor_from_world = sensor.pose.inverse()
        intr = sensor.intrinsics
        next_body_id = 0
        body_ids: dict[str, int] = {}
        last_seen: dict[str, int] = {}
        captures = script.schedule.capture_times(sensor.sensor_id, duration_us)
        for capture_index, ts in enumerate(captures):
            t_s = ts / 1e6
            all_joints = [person_joints(p, t_s, script.scene) for p in script.persons]
            tags: list[Tag] = []
            for person, joints in zip(script.persons, all_joints):
                conf = joint_visibility(joints, sensor, script.occluders)
                if conf[JointId.PELVIS] != Confidence.HIGH:
                    last_seen.pop(person.name, None)
                    continue
                # per-sensor tracker ids reset after a visibility gap
                if last_seen.get(person.name) != capture_index - 1:
                    body_ids[person.name] = next_body_id
                    next_body_id += 1
                last_seen[person.name] = capture_index
                local = sensor_from_world.apply(joints)
                if script.sigma_joint_m > 0:
                    local = local + rng.normal(0.0, script.sigma_joint_m, size=local.shape)
                skel = Skeleton(
                    sensor_id=sensor.sensor_id,
                    body_id=body_ids[person.name],
                    timestamp_us=ts,
                    positions=local,
                    confidences=conf,
                    frame="sensor",
                )
                emit(f"skel.{sensor.sensor_id}", ts, skeleton_to_record(skel))
                tags.extend(_person_tags(person, joints, conf, sensor, t_s))
            emit(f"tags.{sensor.sensor_id}", ts,
                 TagFrame(sensor.sensor_id, ts, intr.width, intr.height,
                          tuple(tags)).to_record())
            if sensor.depth_every > 0 and capture_index % sensor.depth_every == 0:
                depth = render_depth(sensor, all_joints, script.occluders, script.scene)
                if script.sigma_depth_m > 0:
                    noise = rng.normal(0.0, script.sigma_depth_m, size=depth.shape)
                    depth = np.where(depth > 0, depth + noise.astype(np.float32), depth)
                    depth = np.maximum(depth, 0.0).astype(np.float32)
                emit(f"depth.{sensor.sensor_id}", ts, {
                    "kind": "depth",
                    "sensor_id": sensor.sensor_id,
                    "ts_us": ts,
                    "width": intr.width,
                    "height": intr.height,
                    "depths": depth.astype("<f4").tobytes(),
                })

    truth = GroundTruth()
    for tick in fusion_ticks(script.schedule, duration_us):
        t_s = tick / 1e6
        persons = {}
        for person in script.persons:
            joints = person_joints(person, t_s, script.scene)
            persons[person.name] = _person_truth(script, person, t_s, joints)
        truth.ticks.append(TickTruth(tick_us=tick, persons=persons))
    return ScenarioOutput(script=script, streams=streams, truth=truth)


def _person_tags(person: PersonSpec, joints: np.ndarray, conf: np.ndarray,
                 sensor: SensorSpec, t_s: float) -> list[Tag]:
    intr = sensor.intrinsics
    local = sensor.pose.inverse().apply(joints)
    tags = []
    spots = [("face", JointId.HEAD, person.identity)]
    for hand in ("left", "right"):
        spec = _active(person.gestures, t_s, hand)
        if spec is not None:
            joint = JointId.LEFT_HAND if hand == "left" else JointId.RIGHT_HAND
            tags_part = f"{hand}_hand"
            spots.append((tags_part, joint, spec.label))
    for part, joint, label in spots:
        if conf[joint] != Confidence.HIGH:
            continue
        z = local[joint, 2]
        u = int(round(intr.fx * local[joint, 0] / z + intr.cx))
        v = int(round(intr.fy * local[joint, 1] / z + intr.cy))
        if 0 <= u < intr.width and 0 <= v < intr.height:
            tags.append(Tag(part=part, label=label, u=u, v=v))
    return tags


def depth_record_to_image(record: dict) -> DepthImage:
    data = np.frombuffer(record["depths"], dtype="<f4")
    return DepthImage(record["width"], record["height"],
                      data.reshape(record["height"], record["width"]))


def sensor_meta_from_record(r: dict) -> tuple[str, CameraIntrinsics, RigidTransform]:
    """(sensor_id, intrinsics, pose hint) from a 'sensor_meta' record."""
    intr = CameraIntrinsics(fx=float(r["fx"]), fy=float(r["fy"]),
                            cx=float(r["cx"]), cy=float(r["cy"]),
                            width=int(r["width"]), height=int(r["height"]))
    rot = r["pose_hint"]["rotation"]
    tr = r["pose_hint"]["translation"]
    pose = RigidTransform(
        np.array([rot["w"], rot["x"], rot["y"], rot["z"]], dtype=np.float64),
        vec3(float(tr["x"]), float(tr["y"]), float(tr["z"])))
    return r["sensor_id"], intr, pose


# ---------------------------------------------------------------------------
# script files
# ---------------------------------------------------------------------------

def load_script(path: str | Path) -> ScenarioScript:
    """Scenario script from YAML; see docs/formats.md for the schema."""
    try:
        doc = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise InvalidScriptError(f"bad YAML: {exc}") from exc
    return script_from_doc(doc)


def script_to_doc(script: ScenarioScript) -> dict:
    from .calibration import scene_to_doc

    def pose_doc(pose: RigidTransform) -> dict:
        q = pose.rotation
        t = pose.translation
        return {"rotation": {"w": float(q[0]), "x": float(q[1]),
                             "y": float(q[2]), "z": float(q[3])},
                "translation": [float(t[0]), float(t[1]), float(t[2])]}

    return {
        "name": script.name,
        "duration_s": script.duration_s,
        "seed": script.seed,
        "scene": scene_to_doc(script.scene),
        "schedule": {"period_us": script.schedule.period_us,
                     "slots": dict(script.schedule.slots)},
        "sensors": [
            {
                "id": s.sensor_id,
                "pose": pose_doc(s.pose),
                "intrinsics": {"fx": s.intrinsics.fx, "fy": s.intrinsics.fy,
                               "cx": s.intrinsics.cx, "cy": s.intrinsics.cy,
                               "width": s.intrinsics.width,
                               "height": s.intrinsics.height},
                "depth_every": s.depth_every,
            }
            for s in script.sensors],
        "persons": [
            {
                "name": p.name,
                "identity": p.identity,
                "height": float(p.height_m),
                "path": [[float(x) for x in wp] for wp in p.path],
                **({"look_at": [float(x) for x in p.look_at]}
                   if p.look_at is not None else {}),
                **({"pointing": [[float(i.start_s), float(i.end_s), i.hand,
                                  i.screen_id, float(i.u), float(i.v)]
                                 for i in p.pointing]} if p.pointing else {}),
                **({"gestures": [[float(g.start_s), float(g.end_s), g.hand, g.label]
                                 for g in p.gestures]} if p.gestures else {}),
            }
            for p in script.persons],
        "occluders": [{"min": [float(x) for x in b.lo],
                       "max": [float(x) for x in b.hi]}
                      for b in script.occluders],
        "noise": {"sigma_joint_m": script.sigma_joint_m,
                  "sigma_depth_m": script.sigma_depth_m},
    }


def save_script(script: ScenarioScript, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(script_to_doc(script), sort_keys=False))


def script_from_doc(doc: dict) -> ScenarioScript:
    try:
        scene = scene_from_doc(doc["scene"])
        sched_doc = doc.get("schedule", {})
        sensors = []
        for s in doc["sensors"]:
            intr = s["intrinsics"]
            pose_doc = s["pose"]
            if "look_at" in pose_doc:
                from .geometry import camera_look_at
                pose = camera_look_at(vec3(*pose_doc["position"]),
                                      vec3(*pose_doc["look_at"]))
            else:
                r = pose_doc["rotation"]
                pose = RigidTransform(
                    np.array([r["w"], r["x"], r["y"], r["z"]]),
                    vec3(*pose_doc["translation"]))
            sensors.append(SensorSpec(
                sensor_id=s["id"],
                pose=pose,
                intrinsics=CameraIntrinsics(
                    fx=float(intr["fx"]), fy=float(intr["fy"]),
                    cx=float(intr["cx"]), cy=float(intr["cy"]),
                    width=int(intr["width"]), height=int(intr["height"])),
                depth_every=int(s.get("depth_every", 0)),
            ))
        sensor_ids = [s.sensor_id for s in sensors]
        if "slots" in sched_doc:
            schedule = SensorSchedule(slots=dict(sched_doc["slots"]),
                                      period_us=int(sched_doc.get("period_us", 33_333)))
        else:
            schedule = SensorSchedule.evenly_spaced(
                sensor_ids, period_us=int(sched_doc.get("period_us", 33_333)))
        persons = tuple(
            PersonSpec(
                name=p["name"],
                identity=p.get("identity", p["name"]),
                height_m=float(p.get("height", 1.7)),
                path=tuple(tuple(map(float, wp)) for wp in p["path"]),
                look_at=tuple(p["look_at"]) if "look_at" in p else None,
                pointing=tuple(PointingSpec(float(i[0]), float(i[1]), i[2], i[3],
                                            float(i[4]), float(i[5]))
                               for i in p.get("pointing", [])),
                gestures=tuple(GestureSpec(float(i[0]), float(i[1]), i[2], i[3])
                               for i in p.get("gestures", [])),
            )
            for p in doc.get("persons", []))
        occluders = tuple(
            BoxSpec(lo=np.array(o["min"], dtype=np.float64),
                    hi=np.array(o["max"], dtype=np.float64))
            for o in doc.get("occluders", []))
        noise = doc.get("noise", {})
        return ScenarioScript(
            name=str(doc.get("name", "scenario")),
            scene=scene,
            schedule=schedule,
            sensors=tuple(sensors),
            persons=persons,
            occluders=occluders,
            sigma_joint_m=float(noise.get("sigma_joint_m", 0.0)),
            sigma_depth_m=float(noise.get("sigma_depth_m", 0.0)),
            duration_s=float(doc.get("duration_s", 10.0)),
            seed=int(doc.get("seed", 0)),
        )
    except InvalidScriptError:
        raise
    except (KeyError, TypeError, IndexError, ValueError) as exc:
        raise InvalidScriptError(f"bad scenario script: {exc!r}") from exc
