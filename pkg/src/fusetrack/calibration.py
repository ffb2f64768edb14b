"""Scene calibration (camera vs. screens) and multi-sensor calibration
(camera vs. camera), with file persistence.

The multi-sensor path follows two stages: a coarse inter-sensor transform
from a person tracked by both cameras, then an optional point-cloud ICP
refinement seeded by it. Refinement is guarded by held-out validation on
the skeleton correspondences so it can only be accepted when it actually
improves the alignment (see calibrate_pair).

Calibration files are YAML: one `world_from_main` transform plus one
`main_from_sensor` transform per sensor, each as a unit quaternion
(w, x, y, z) and a translation in metres. See docs/formats.md.
"""

from __future__ import annotations

import datetime as _dt
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .geometry import RigidTransform, ScreenRect, vec3
from .pointcloud import (
    DegenerateConfigurationError,
    IcpParams,
    IcpResult,
    PointCloud,
    icp,
    kabsch,
)
from .skeleton import Confidence, Skeleton, interpolate

DEFAULT_BAND_M = 0.15
DEFAULT_MIN_SAMPLES = 30
SCENE_SAMPLE_PITCH_M = 0.02


class CalibrationError(ValueError):
    pass


class CalibrationParseError(CalibrationError):
    pass


class InvariantViolationError(CalibrationError):
    pass


class DisconnectedSensorError(CalibrationError):
    pass


class AmbiguousPathError(CalibrationError):
    pass


class InsufficientOverlapError(CalibrationError):
    pass


class GrossMisalignmentError(CalibrationError):
    pass


@dataclass(frozen=True)
class SceneModel:
    """Physical screen layout in the world frame (origin: bottom-left corner
    of the first screen)."""

    screens: tuple[ScreenRect, ...]

    def __post_init__(self):
        if not self.screens:
            raise CalibrationError("scene needs at least one screen")
        ids = [s.screen_id for s in self.screens]
        if len(set(ids)) != len(ids):
            raise CalibrationError(f"duplicate screen ids in {ids}")

    def screen(self, screen_id: str) -> ScreenRect:
        for s in self.screens:
            if s.screen_id == screen_id:
                return s
        raise KeyError(screen_id)


@dataclass
class CalibrationSet:
    """Transforms mapping every sensor into the main sensor, and the main
    sensor into the world (scene) frame."""

    main_sensor_id: str
    world_from_main: RigidTransform
    main_from_sensor: dict[str, RigidTransform]
    created_at: str = ""
    residuals: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not self.created_at:
            self.created_at = _dt.datetime.now(_dt.timezone.utc).isoformat()
        self.validate()

    def validate(self) -> None:
        if self.main_sensor_id not in self.main_from_sensor:
            raise InvariantViolationError("main sensor missing from transform map")
        ident = self.main_from_sensor[self.main_sensor_id]
        if (np.linalg.norm(ident.translation) > 1e-9
                or 2.0 * np.linalg.norm(ident.rotation[1:]) > 1e-9):
            raise InvariantViolationError("main sensor must map to identity")

    @property
    def sensor_ids(self) -> list[str]:
        return sorted(self.main_from_sensor)

    def world_from_sensor(self, sensor_id: str) -> RigidTransform:
        return self.world_from_main.compose(self.main_from_sensor[sensor_id])


# ---------------------------------------------------------------------------
# scene alignment
# ---------------------------------------------------------------------------

def alignment_residual(cloud: PointCloud, pose: RigidTransform, scene: SceneModel,
                       band: float = DEFAULT_BAND_M) -> tuple[float, int]:
    """RMSE of point-to-plane distances for cloud points near the screens.

    The cloud (sensor frame) is placed into the world by `pose`; points
    within `band` of a screen plane and inside its rectangle footprint
    count, each against its nearest qualifying plane. (inf, 0) when nothing
    qualifies.
    """
    if len(cloud) == 0:
        raise CalibrationError("cannot score an empty cloud")
    pts = pose.apply(cloud.points)
    best = np.full(len(pts), np.inf)
    for screen in scene.screens:
        rel = pts - screen.origin
        d = np.abs(rel @ screen.normal)
        a = rel @ screen.u_axis
        b = rel @ screen.v_axis
        ok = (d <= band) & (a >= 0) & (a <= screen.width) & (b >= 0) & (b <= screen.height)
        best = np.where(ok & (d < best), d, best)
    sel = best[np.isfinite(best)]
    if sel.size == 0:
        return math.inf, 0
    return float(np.sqrt(np.mean(sel ** 2))), int(sel.size)


def sample_scene_cloud(scene: SceneModel, pitch: float = SCENE_SAMPLE_PITCH_M) -> PointCloud:
    """Dense world-frame sampling of the screen rectangles (grid per screen)."""
    chunks = []
    for screen in scene.screens:
        nu = max(2, int(round(screen.width / pitch)) + 1)
        nv = max(2, int(round(screen.height / pitch)) + 1)
        us = np.linspace(0.0, screen.width, nu)
        vs = np.linspace(0.0, screen.height, nv)
        uu, vv = np.meshgrid(us, vs)
        pts = (screen.origin[None, :]
               + uu.reshape(-1, 1) * screen.u_axis[None, :]
               + vv.reshape(-1, 1) * screen.v_axis[None, :])
        chunks.append(pts)
    return PointCloud(np.vstack(chunks))


SELECT_BAND_M = 0.2
SELECT_PAD_M = 0.05


def select_scene_points(cloud: PointCloud, pose: RigidTransform, scene: SceneModel,
                        band: float = SELECT_BAND_M,
                        pad: float = SELECT_PAD_M) -> np.ndarray:
    """Mask of cloud points near some screen under `pose` (plane distance
    within `band`, inside the rectangle footprint padded by `pad`)."""
    pts = pose.apply(cloud.points)
    mask = np.zeros(len(pts), dtype=bool)
    for screen in scene.screens:
        rel = pts - screen.origin
        d = np.abs(rel @ screen.normal)
        a = rel @ screen.u_axis
        b = rel @ screen.v_axis
        mask |= ((d <= band) & (a >= -pad) & (a <= screen.width + pad)
                 & (b >= -pad) & (b <= screen.height + pad))
    return mask


def refine_scene_pose(cloud: PointCloud, init: RigidTransform, scene: SceneModel,
                      params: IcpParams = IcpParams(),
                      band: float = DEFAULT_BAND_M) -> IcpResult:
    """ICP of the sensor cloud against a dense sampling of the screen planes.

    Requires a human-provided rough alignment: when `init` puts no cloud
    point near any screen, the pose is too far gone for local refinement.
    Only points already near a screen under `init` feed the ICP, so persons
    and furniture in the view cannot bias the fit (and the correspondence
    set stays stable, keeping the RMSE trace monotone). Returns the refined
    world_from_sensor.
    """
    rmse, count = alignment_residual(cloud, init, scene, band)
    if not math.isfinite(rmse):
        raise GrossMisalignmentError(
            "no cloud point lands near any screen under the initial pose")
    mask = select_scene_points(cloud, init, scene)
    if int(mask.sum()) < params.min_points:
        raise GrossMisalignmentError(
            f"only {int(mask.sum())} cloud points near the screens under init")
    return icp(PointCloud(cloud.points[mask]), sample_scene_cloud(scene),
               init=init, params=params)


# ---------------------------------------------------------------------------
# person-reference calibration
# ---------------------------------------------------------------------------

def _aligned_joint_pairs(track_a: list[Skeleton], track_b: list[Skeleton],
                         min_confidence: int, max_gap_us: int):
    """Correspondences (points_b, points_a) per aligned frame.

    track_b is interpolated onto track_a's timestamps; joints need the given
    confidence in both skeletons to participate.
    """
    if not track_a or not track_b:
        return []
    track_b = sorted(track_b, key=lambda s: s.timestamp_us)
    times_b = [s.timestamp_us for s in track_b]
    pairs = []
    j = 0
    for ska in sorted(track_a, key=lambda s: s.timestamp_us):
        t = ska.timestamp_us
        while j + 1 < len(times_b) and times_b[j + 1] <= t:
            j += 1
        if times_b[j] > t or (times_b[j] < t and j + 1 >= len(times_b)):
            continue
        if times_b[j] == t:
            skb = track_b[j]
        else:
            if times_b[j + 1] - times_b[j] > max_gap_us:
                continue
            skb = interpolate(track_b[j], track_b[j + 1], t, max_gap_us)
        both = ((ska.confidences >= min_confidence)
                & (skb.confidences >= min_confidence))
        if int(both.sum()) < 3:
            continue
        pairs.append((skb.positions[both], ska.positions[both]))
    return pairs


def person_reference_calibration(track_a: list[Skeleton], track_b: list[Skeleton],
                                 min_samples: int = DEFAULT_MIN_SAMPLES,
                                 min_confidence: int = Confidence.MEDIUM,
                                 max_gap_us: int = 200_000) -> RigidTransform:
    """Inter-sensor transform (a_from_b) from one person seen by two cameras.

    Builds joint correspondences across all timestamp-aligned frames and
    solves a single Kabsch problem mapping sensor-b coordinates into
    sensor-a coordinates.
    """
    pairs = _aligned_joint_pairs(track_a, track_b, min_confidence, max_gap_us)
    if len(pairs) < min_samples:
        raise InsufficientOverlapError(
            f"only {len(pairs)} aligned frames, need {min_samples}")
    points_b = np.vstack([p for p, _ in pairs])
    points_a = np.vstack([q for _, q in pairs])
    return kabsch(points_b, points_a)


@dataclass(frozen=True)
class PairCalibration:
    transform: RigidTransform          # a_from_b, the accepted result
    coarse: RigidTransform             # person-reference on all frames
    refined: RigidTransform | None     # ICP candidate (None if ICP failed)
    refinement_accepted: bool
    validation_coarse_m: float
    validation_refined_m: float


def calibrate_pair(track_a: list[Skeleton], track_b: list[Skeleton],
                   cloud_a: PointCloud | None = None,
                   cloud_b: PointCloud | None = None,
                   icp_params: IcpParams | None = None,
                   min_samples: int = DEFAULT_MIN_SAMPLES) -> PairCalibration:
    """Person-reference calibration plus guarded ICP refinement.

    The guard: fit person-reference on even-index frames, seed ICP
    (cloud_b onto cloud_a) from it, score both candidates on the odd-index
    frames, and accept refinement only when it scores strictly better. The
    returned transform is then refitted on all frames (coarse) or taken
    from ICP (refined), whichever won.
    """
    coarse = person_reference_calibration(track_a, track_b, min_samples=min_samples)
    if cloud_a is None or cloud_b is None or len(cloud_a) == 0 or len(cloud_b) == 0:
        return PairCalibration(coarse, coarse, None, False, math.nan, math.nan)

    pairs = _aligned_joint_pairs(track_a, track_b, Confidence.MEDIUM, 200_000)
    fit_pairs = pairs[0::2]
    val_pairs = pairs[1::2]
    if len(fit_pairs) < 3 or not val_pairs:
        return PairCalibration(coarse, coarse, None, False, math.nan, math.nan)

    held_out = kabsch(np.vstack([p for p, _ in fit_pairs]),
                      np.vstack([q for _, q in fit_pairs]))
    params = icp_params if icp_params is not None else IcpParams(reject_threshold=0.3)
    try:
        refined = icp(cloud_b, cloud_a, init=held_out, params=params).transform
    except (ValueError, DegenerateConfigurationError):
        return PairCalibration(coarse, coarse, None, False, math.nan, math.nan)

    vb = np.vstack([p for p, _ in val_pairs])
    va = np.vstack([q for _, q in val_pairs])

    def score(t: RigidTransform) -> float:
        err = t.apply(vb) - va
        return float(np.sqrt(np.mean(np.sum(err * err, axis=1))))

    s_coarse = score(held_out)
    s_refined = score(refined)
    if s_refined < s_coarse:
        return PairCalibration(refined, coarse, refined, True, s_coarse, s_refined)
    return PairCalibration(coarse, coarse, refined, False, s_coarse, s_refined)


# ---------------------------------------------------------------------------
# calibration graph
# ---------------------------------------------------------------------------

def build_calibration(main_sensor_id: str, world_from_main: RigidTransform,
                      pairwise: list[tuple[str, str, RigidTransform]],
                      residuals: dict[str, float] | None = None) -> CalibrationSet:
    """Chain pairwise transforms into main_from_sensor for every sensor.

    Each edge (a, b, t) maps sensor-b coordinates into sensor-a coordinates.
    The edges must form a tree rooted at the main sensor: cycles are
    rejected as ambiguous, unreachable sensors as disconnected.
    """
    sensors = {main_sensor_id}
    for a, b, _ in pairwise:
        sensors.update((a, b))
    resolved: dict[str, RigidTransform] = {main_sensor_id: RigidTransform.identity()}
    remaining = list(pairwise)
    while remaining:
        progressed = False
        next_remaining = []
        for a, b, t in remaining:
            if a in resolved and b in resolved:
                raise AmbiguousPathError(
                    f"edge {a}<-{b} closes a cycle in the calibration graph")
            if a in resolved:
                resolved[b] = resolved[a].compose(t)
                progressed = True
            elif b in resolved:
                resolved[a] = resolved[b].compose(t.inverse())
                progressed = True
            else:
                next_remaining.append((a, b, t))
        remaining = next_remaining
        if not progressed and remaining:
            missing = sorted({s for a, b, _ in remaining for s in (a, b)} - set(resolved))
            raise DisconnectedSensorError(
                f"sensors {missing} have no path to {main_sensor_id}")
    unreachable = sorted(sensors - set(resolved))
    if unreachable:
        raise DisconnectedSensorError(
            f"sensors {unreachable} have no path to {main_sensor_id}")
    return CalibrationSet(
        main_sensor_id=main_sensor_id,
        world_from_main=world_from_main,
        main_from_sensor=resolved,
        residuals=dict(residuals or {}),
    )


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def scene_from_doc(doc: dict) -> SceneModel:
    """SceneModel from its YAML document form ({"screens": [...]})."""
    try:
        screens = tuple(
            ScreenRect(
                screen_id=s["id"],
                origin=vec3(*s["origin"]),
                u_axis=vec3(*s["u_axis"]),
                v_axis=vec3(*s["v_axis"]),
                width=float(s["width"]),
                height=float(s["height"]),
                pixel_width=int(s.get("pixels", [1920, 1080])[0]),
                pixel_height=int(s.get("pixels", [1920, 1080])[1]),
            )
            for s in doc["screens"])
    except (KeyError, TypeError, IndexError) as exc:
        raise CalibrationParseError(f"bad scene document: {exc!r}") from exc
    return SceneModel(screens=screens)


def scene_to_doc(scene: SceneModel) -> dict:
    return {"screens": [
        {
            "id": s.screen_id,
            "origin": [float(x) for x in s.origin],
            "u_axis": [float(x) for x in s.u_axis],
            "v_axis": [float(x) for x in s.v_axis],
            "width": float(s.width),
            "height": float(s.height),
            "pixels": [s.pixel_width, s.pixel_height],
        }
        for s in scene.screens]}


def load_scene(path: str | Path) -> SceneModel:
    try:
        doc = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise CalibrationParseError(f"bad YAML: {exc}") from exc
    if not isinstance(doc, dict):
        raise CalibrationParseError("scene file must be a mapping")
    return scene_from_doc(doc)


def save_scene(scene: SceneModel, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(scene_to_doc(scene), sort_keys=False))


FORMAT_TAG = "fusetrack-calibration/1"


def _transform_to_doc(t: RigidTransform) -> dict:
    q = t.rotation
    v = t.translation
    return {
        "rotation": {"w": float(q[0]), "x": float(q[1]), "y": float(q[2]), "z": float(q[3])},
        "translation": {"x": float(v[0]), "y": float(v[1]), "z": float(v[2])},
    }


def _transform_from_doc(doc: dict) -> RigidTransform:
    try:
        r = doc["rotation"]
        v = doc["translation"]
        q = np.array([r["w"], r["x"], r["y"], r["z"]], dtype=np.float64)
        t = vec3(float(v["x"]), float(v["y"]), float(v["z"]))
    except (KeyError, TypeError) as exc:
        raise CalibrationParseError(f"malformed transform: {exc}") from exc
    if abs(float(np.linalg.norm(q)) - 1.0) > 1e-9:
        raise InvariantViolationError(f"non-unit quaternion {q.tolist()}")
    return RigidTransform(q, t)


def save_calibration(calib: CalibrationSet, path: str | Path) -> None:
    doc = {
        "format": FORMAT_TAG,
        "created_at": calib.created_at,
        "main_sensor": calib.main_sensor_id,
        "world_from_main": _transform_to_doc(calib.world_from_main),
        "sensors": {
            sensor: {
                "main_from_sensor": _transform_to_doc(t),
                "residual_m": float(calib.residuals.get(sensor, 0.0)),
            }
            for sensor, t in sorted(calib.main_from_sensor.items())
        },
    }
    Path(path).write_text(yaml.safe_dump(doc, sort_keys=True))


def load_calibration(path: str | Path) -> CalibrationSet:
    try:
        doc = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise CalibrationParseError(f"bad YAML: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != FORMAT_TAG:
        raise CalibrationParseError(f"not a {FORMAT_TAG} file")
    try:
        main = doc["main_sensor"]
        world_from_main = _transform_from_doc(doc["world_from_main"])
        sensors = doc["sensors"]
        main_from_sensor = {s: _transform_from_doc(entry["main_from_sensor"])
                            for s, entry in sensors.items()}
        residuals = {s: float(entry.get("residual_m", 0.0))
                     for s, entry in sensors.items()}
    except (KeyError, TypeError) as exc:
        raise CalibrationParseError(f"missing field: {exc}") from exc
    return CalibrationSet(
        main_sensor_id=main,
        world_from_main=world_from_main,
        main_from_sensor=main_from_sensor,
        created_at=str(doc.get("created_at", "")),
        residuals=residuals,
    )
