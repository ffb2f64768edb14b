"""End-to-end orchestration: sensor envelopes -> calibrated world frame ->
merged tracked persons -> pointing/gaze targets + body-part crops ->
recognizer dispatch -> user-attributed behaviour events.

Determinism contract: event output is a pure function of the envelope log.
The loop runs on logical time (fusion ticks). Crops dispatched at tick T are
settled (reply awaited, bounded by the transport timeout) at the next
processed tick, so event content does not depend on recognizer latency as
long as replies beat the timeout - the keystone property behind replayable
sessions. Results only ever enrich future events; an emitted event is
immutable.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator

import numpy as np

from .calibration import CalibrationSet, SceneModel
from .geometry import (
    CameraIntrinsics,
    Ray,
    RigidTransform,
    ScreenHit,
    intersect_screen,
    project,
)
from .simsensor import TagFrame, sensor_meta_from_record
from .skeleton import (
    Confidence,
    JointId,
    MergedBody,
    PersonTracker,
    Skeleton,
    match_skeletons,
    merge,
)
from .streams import (
    Envelope,
    SensorSchedule,
    SkeletonBuffer,
    fusion_ticks,
    skeleton_from_record,
    synchronize,
)
from . import wire

HANDS = ("left", "right")
PART_JOINT = {
    "face": JointId.HEAD,
    "left_hand": JointId.LEFT_HAND,
    "right_hand": JointId.RIGHT_HAND,
}
HAND_PART = {"left": "left_hand", "right": "right_hand"}


class PipelineError(RuntimeError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    """Fusion thresholds; every field has the documented default."""

    match_threshold_m: float = 0.5
    max_gap_us: int = 200_000
    join_window_us: int = 500_000
    lost_timeout_us: int = 2_000_000
    identity_min_confidence: float = 0.8
    gesture_min_confidence: float = 0.5
    pointing_mode: str = "forearm"          # "forearm" | "head_hand"
    face_crop_m: float = 0.25
    hand_crop_m: float = 0.30
    min_crop_px: int = 16
    crop_interval_ticks: int = 1
    request_timeout_s: float = 0.3


@dataclass(frozen=True)
class CropRequest:
    person_id: int
    sensor_id: str
    part: str
    timestamp_us: int
    u0: int
    v0: int
    side_px: int
    pixels: bytes


@dataclass(frozen=True)
class RecognitionResult:
    person_id: int
    part: str
    timestamp_us: int
    label: str
    confidence: float


@dataclass
class BehaviourEvent:
    person_id: int
    timestamp_us: int
    pointing: dict[str, ScreenHit | None]
    gaze: ScreenHit | None
    gesture: dict[str, tuple[str, float] | None]
    identity: tuple[str, float] | None

    def to_json(self) -> str:
        def hit_obj(hit: ScreenHit | None):
            if hit is None:
                return None
            return {
                "screen": hit.screen_id,
                "u": float(hit.u), "v": float(hit.v),
                "px": float(hit.pixel_u), "py": float(hit.pixel_v),
                "point": [float(x) for x in hit.point],
            }

        obj = {
            "person_id": int(self.person_id),
            "ts_us": int(self.timestamp_us),
            "pointing": {h: hit_obj(self.pointing.get(h)) for h in HANDS},
            "gaze": hit_obj(self.gaze),
            "gesture": {h: (None if self.gesture.get(h) is None
                            else [self.gesture[h][0], float(self.gesture[h][1])])
                        for h in HANDS},
            "identity": (None if self.identity is None
                         else [self.identity[0], float(self.identity[1])]),
        }
        return json.dumps(obj, sort_keys=True, separators=(",", ":"))


# ---------------------------------------------------------------------------
# rays and targets
# ---------------------------------------------------------------------------

def _confident(body: MergedBody, joint: JointId) -> bool:
    return body.confidences[int(joint)] >= Confidence.MEDIUM


def pointing_ray(body: MergedBody, hand: str, mode: str = "forearm") -> Ray | None:
    """Forearm ray (elbow -> hand) by default; optionally head -> hand."""
    hand_joint = JointId.LEFT_HAND if hand == "left" else JointId.RIGHT_HAND
    if mode == "head_hand":
        origin_joint = JointId.HEAD
    else:
        origin_joint = JointId.LEFT_ELBOW if hand == "left" else JointId.RIGHT_ELBOW
    if not (_confident(body, origin_joint) and _confident(body, hand_joint)):
        return None
    origin = body.positions[int(origin_joint)]
    tip = body.positions[int(hand_joint)]
    if float(np.linalg.norm(tip - origin)) < 1e-9:
        return None
    return Ray(origin, tip - origin)


def gaze_ray(body: MergedBody) -> Ray | None:
    """Head-forward gaze: the head-neck axis tipped 90 degrees toward the
    body-forward direction (shoulder line x spine)."""
    needed = (JointId.HEAD, JointId.NECK, JointId.LEFT_SHOULDER,
              JointId.RIGHT_SHOULDER, JointId.PELVIS)
    if not all(_confident(body, j) for j in needed):
        return None
    head = body.positions[int(JointId.HEAD)]
    neck = body.positions[int(JointId.NECK)]
    up = head - neck
    n_up = float(np.linalg.norm(up))
    if n_up < 1e-9:
        return None
    up = up / n_up
    forward = np.cross(
        body.positions[int(JointId.LEFT_SHOULDER)] - body.positions[int(JointId.RIGHT_SHOULDER)],
        neck - body.positions[int(JointId.PELVIS)])
    # rotate `up` by 90 degrees toward `forward`: the unit component of
    # forward orthogonal to up
    perp = forward - float(np.dot(forward, up)) * up
    n_perp = float(np.linalg.norm(perp))
    if n_perp < 1e-9:
        return None
    return Ray(head, perp / n_perp)


def screen_target(ray: Ray | None, scene: SceneModel) -> ScreenHit | None:
    if ray is None:
        return None
    best = None
    for screen in scene.screens:
        hit = intersect_screen(ray, screen)
        if hit is not None and (best is None or hit.distance < best.distance):
            best = hit
    return best


# ---------------------------------------------------------------------------
# crops
# ---------------------------------------------------------------------------

@dataclass
class SensorView:
    """One sensor's contribution at a tick: interpolated sensor-frame
    skeletons plus the latest colour (tag) frame."""

    sensor_id: str
    intrinsics: CameraIntrinsics
    by_body: dict[int, Skeleton]
    tag_frame: TagFrame | None


def make_crops(body: MergedBody, views: dict[str, SensorView],
               config: PipelineConfig, tick_us: int) -> list[CropRequest]:
    """Square crops around face and hands, each taken from the contributing
    sensor that sees the joint closest (highest pixel density)."""
    crops: list[CropRequest] = []
    for part in ("face", "left_hand", "right_hand"):
        joint = PART_JOINT[part]
        if not _confident(body, joint):
            continue
        candidates = []
        for sensor_id, body_id in body.contributors:
            view = views.get(sensor_id)
            if view is None or view.tag_frame is None:
                continue
            skel = view.by_body.get(body_id)
            if skel is None or skel.confidences[int(joint)] < Confidence.MEDIUM:
                continue
            z = float(skel.positions[int(joint)][2])
            if z <= 0:
                continue
            candidates.append((z, sensor_id, skel))
        if not candidates:
            continue
        z, sensor_id, skel = min(candidates, key=lambda c: (c[0], c[1]))
        view = views[sensor_id]
        intr = view.intrinsics
        size_m = config.face_crop_m if part == "face" else config.hand_crop_m
        side = int(round(intr.fx * size_m / z))
        side = min(side, intr.width, intr.height)
        if side < config.min_crop_px:
            continue
        u, v = project(intr, skel.positions[int(joint)])
        u0 = int(np.clip(round(u - side / 2), 0, intr.width - side))
        v0 = int(np.clip(round(v - side / 2), 0, intr.height - side))
        crops.append(CropRequest(
            person_id=body.person_id,
            sensor_id=sensor_id,
            part=part,
            timestamp_us=tick_us,
            u0=u0, v0=v0, side_px=side,
            pixels=view.tag_frame.crop(u0, v0, side),
        ))
    return crops


# ---------------------------------------------------------------------------
# identity registry
# ---------------------------------------------------------------------------

@dataclass
class IdentityRegistry:
    """Persistent identity_label <-> person_id binding surviving track loss."""

    label_to_pid: dict[str, int] = field(default_factory=dict)
    confidence: dict[str, float] = field(default_factory=dict)


def attach_identity(body: MergedBody, result: RecognitionResult,
                    registry: IdentityRegistry, tracker: PersonTracker,
                    min_confidence: float = 0.8) -> MergedBody:
    """Apply a face recognition result to a tracked body.

    Labels below the confidence threshold are ignored. A label already bound
    to a retired track restores that track's person id; a label claimed by
    two live bodies goes to the higher confidence, the loser reverting to
    anonymous.
    """
    if result.part != "face" or result.confidence < min_confidence:
        return body
    label = result.label
    pid = body.person_id
    bound = registry.label_to_pid.get(label)
    if bound is not None and bound != pid:
        live_pids = {b.person_id for b in tracker.live}
        if bound in live_pids:
            # conflict between two live bodies
            if result.confidence > registry.confidence.get(label, 0.0):
                tracker.clear_identity(bound)
            else:
                return body
        else:
            # retired track: restore its person id to this body
            tracker.rename(pid, bound)
            body.person_id = bound
            pid = bound
    registry.label_to_pid[label] = pid
    registry.confidence[label] = result.confidence
    body.identity_label = label
    body.identity_confidence = result.confidence
    return body


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------

@dataclass
class _InFlight:
    key: tuple
    client: object
    person_id: int
    part: str
    dispatched_us: int


class Pipeline:
    """Envelope-driven fusion loop.

    `recognizers` maps service names {"face", "gesture"} to request/reply
    clients (wire.RecognizerClient or wire.InProcessClient); either may be
    absent, in which case the matching event fields stay empty.
    """

    def __init__(self, scene: SceneModel, calib: CalibrationSet,
                 schedule: SensorSchedule, config: PipelineConfig = PipelineConfig(),
                 recognizers: dict[str, object] | None = None,
                 on_tick: Callable | None = None):
        self.scene = scene
        self.calib = calib
        self.schedule = schedule
        self.config = config
        self.recognizers = recognizers or {}
        self.on_tick = on_tick
        self.tracker = PersonTracker(lost_timeout_us=config.lost_timeout_us)
        self.registry = IdentityRegistry()
        self.counters = {
            "events": 0, "crops_sent": 0, "results_joined": 0,
            "timeouts": 0, "late_drops": 0, "transport_errors": 0,
            "recognizer_errors": 0, "unmatched_results": 0,
        }
        self._buffers: dict[str, SkeletonBuffer] = {}
        self._intrinsics: dict[str, CameraIntrinsics] = {}
        self._tag_frames: dict[str, list[TagFrame]] = {}
        self.depth_records: dict[str, dict] = {}
        self._in_flight: list[_InFlight] = []
        self._alias: dict[int, int] = {}
        self._tick_index = 0
        self._hash = hashlib.sha256()

    # -- ingestion -----------------------------------------------------

    def _ingest(self, env: Envelope) -> None:
        payload = env.payload
        kind = payload.get("kind")
        if kind == "skeleton":
            skel = skeleton_from_record(payload)
            buf = self._buffers.get(skel.sensor_id)
            if buf is None:
                buf = SkeletonBuffer(skel.sensor_id, period_us=self.schedule.period_us)
                self._buffers[skel.sensor_id] = buf
            buf.add(skel)
        elif kind == "tags":
            frames = self._tag_frames.setdefault(payload["sensor_id"], [])
            frames.append(TagFrame.from_record(payload))
            del frames[:-4]
        elif kind == "depth":
            self.depth_records[payload["sensor_id"]] = payload
        elif kind == "sensor_meta":
            sensor_id, intr, _pose = sensor_meta_from_record(payload)
            self._intrinsics[sensor_id] = intr
            self._buffers.setdefault(
                sensor_id, SkeletonBuffer(sensor_id, period_us=self.schedule.period_us))

    def _latest_tags(self, sensor_id: str, tick_us: int) -> TagFrame | None:
        best = None
        for frame in self._tag_frames.get(sensor_id, ()):
            if frame.timestamp_us <= tick_us and (
                    best is None or frame.timestamp_us > best.timestamp_us):
                best = frame
        return best

    # -- recognizer plumbing --------------------------------------------

    def _dispatch_crops(self, crops: list[CropRequest]) -> None:
        for crop in crops:
            service = "face" if crop.part == "face" else "gesture"
            client = self.recognizers.get(service)
            if client is None:
                continue
            msg = wire.crop_message(crop.timestamp_us, str(crop.person_id),
                                    crop.part, crop.side_px, crop.side_px,
                                    crop.pixels)
            try:
                key = client.request(msg)
            except (wire.TransportError, OSError):
                self.counters["transport_errors"] += 1
                continue
            self.counters["crops_sent"] += 1
            self._in_flight.append(_InFlight(
                key=key, client=client, person_id=crop.person_id,
                part=crop.part, dispatched_us=crop.timestamp_us))

    def _settle_due(self, tick_us: int) -> list[RecognitionResult]:
        """Resolve every in-flight request from earlier ticks.

        Blocks up to the transport timeout per request, making event content
        independent of recognizer latency below that bound.
        """
        due = [f for f in self._in_flight if f.dispatched_us < tick_us]
        self._in_flight = [f for f in self._in_flight if f.dispatched_us >= tick_us]
        results: list[RecognitionResult] = []
        for flight in sorted(due, key=lambda f: (f.person_id, f.part)):
            try:
                reply = flight.client.settle(flight.key,
                                             timeout_s=self.config.request_timeout_s)
            except wire.RequestTimeoutError:
                self.counters["timeouts"] += 1
                continue
            except (wire.TransportError, OSError):
                self.counters["transport_errors"] += 1
                continue
            if not isinstance(reply, dict) or reply.get("type") != "result":
                self.counters["recognizer_errors"] += 1
                continue
            try:
                wire.validate_result(reply)
            except wire.SchemaViolationError:
                self.counters["recognizer_errors"] += 1
                continue
            if tick_us - reply["ts_us"] > self.config.join_window_us:
                self.counters["late_drops"] += 1
                continue
            pid = int(reply["person_id"])
            pid = self._alias.get(pid, pid)
            results.append(RecognitionResult(
                person_id=pid, part=reply["part"], timestamp_us=reply["ts_us"],
                label=reply["label"], confidence=float(reply["confidence"])))
            self.counters["results_joined"] += 1
        return results

    # -- per-tick processing --------------------------------------------

    def _process_tick(self, tick_us: int) -> list[BehaviourEvent]:
        cfg = self.config
        results = self._settle_due(tick_us)

        synced = synchronize(self._buffers, tick_us, cfg.max_gap_us)
        views: dict[str, SensorView] = {}
        world_groups: list[list[Skeleton]] = []
        for sensor_id in sorted(synced):
            skeletons = synced[sensor_id]
            if sensor_id not in self._intrinsics and skeletons:
                raise PipelineError(f"no sensor_meta for {sensor_id}")
            if skeletons:
                views[sensor_id] = SensorView(
                    sensor_id=sensor_id,
                    intrinsics=self._intrinsics[sensor_id],
                    by_body={s.body_id: s for s in skeletons},
                    tag_frame=self._latest_tags(sensor_id, tick_us),
                )
                world_from_sensor = self.calib.world_from_sensor(sensor_id)
                world_groups.append([s.to_world(world_from_sensor) for s in skeletons])

        sets = match_skeletons(world_groups, cfg.match_threshold_m)
        candidates = [merge(group) for group in sets]
        bodies = self.tracker.update(candidates, tick_us)

        face_results = [r for r in results if r.part == "face"]
        gesture_results = {(r.person_id, r.part): r for r in results
                           if r.part in ("left_hand", "right_hand")}
        by_pid = {b.person_id: b for b in bodies}
        for result in face_results:
            body = by_pid.get(result.person_id)
            if body is None:
                self.counters["unmatched_results"] += 1
                continue
            old_pid = body.person_id
            attach_identity(body, result, self.registry, self.tracker,
                            cfg.identity_min_confidence)
            if body.person_id != old_pid:
                self._alias[old_pid] = body.person_id
                by_pid = {b.person_id: b for b in bodies}

        events: list[BehaviourEvent] = []
        for body in sorted(bodies, key=lambda b: b.person_id):
            pointing = {}
            for hand in HANDS:
                pointing[hand] = screen_target(
                    pointing_ray(body, hand, cfg.pointing_mode), self.scene)
            gaze = screen_target(gaze_ray(body), self.scene)
            gesture: dict[str, tuple[str, float] | None] = {}
            for hand in HANDS:
                r = gesture_results.get((body.person_id, HAND_PART[hand]))
                if r is not None and r.confidence >= cfg.gesture_min_confidence:
                    gesture[hand] = (r.label, r.confidence)
                else:
                    gesture[hand] = None
            identity = None
            if body.identity_label is not None:
                identity = (body.identity_label, float(body.identity_confidence or 0.0))
            events.append(BehaviourEvent(
                person_id=body.person_id,
                timestamp_us=tick_us,
                pointing=pointing,
                gaze=gaze,
                gesture=gesture,
                identity=identity,
            ))

        if self._tick_index % cfg.crop_interval_ticks == 0:
            for body in sorted(bodies, key=lambda b: b.person_id):
                self._dispatch_crops(make_crops(body, views, cfg, tick_us))
        self._tick_index += 1

        for sensor_id in self._buffers:
            self._buffers[sensor_id].advance(tick_us, cfg.max_gap_us)
        for event in events:
            self._hash.update(event.to_json().encode("utf-8"))
            self._hash.update(b"\n")
        self.counters["events"] += len(events)
        if self.on_tick is not None:
            self.on_tick(self, tick_us, events, views)
        return events

    # -- main loop -------------------------------------------------------

    def run(self, envelopes: Iterable[Envelope],
            until_us: int | None = None) -> Iterator[BehaviourEvent]:
        """Consume a time-ordered envelope stream; yields behaviour events.

        A tick T is processed once the stream time passes T + one period
        (every bracketing sample has then arrived), keeping logical event
        latency under two periods.
        """
        period = self.schedule.period_us
        ticks = fusion_ticks(self.schedule, until_us if until_us is not None
                             else 2**62)
        next_tick = next(ticks, None)
        last_time = 0
        for env in envelopes:
            while next_tick is not None and env.originating_time_us > next_tick + period:
                yield from self._process_tick(next_tick)
                next_tick = next(ticks, None)
            self._ingest(env)
            last_time = max(last_time, env.originating_time_us)
        while next_tick is not None and next_tick <= last_time:
            yield from self._process_tick(next_tick)
            next_tick = next(ticks, None)
        self._drain()

    def _drain(self) -> None:
        for flight in self._in_flight:
            try:
                flight.client.settle(flight.key, timeout_s=self.config.request_timeout_s)
            except (wire.WireError, OSError):
                pass
        self._in_flight = []

    def event_hash(self) -> str:
        """SHA-256 over the canonical JSON event lines emitted so far."""
        return self._hash.hexdigest()
