"""Scenario-script builders shared by the test suite.

Room convention: one 2 m x 1.2 m screen on the wall plane z=0 (world origin
at its bottom-left corner), persons standing at z in [1.5, 3].
"""

from __future__ import annotations

import numpy as np

from fusetrack.calibration import SceneModel
from fusetrack.geometry import CameraIntrinsics, RigidTransform, ScreenRect, camera_look_at, vec3
from fusetrack.simsensor import (
    BoxSpec,
    GestureSpec,
    PersonSpec,
    PointingSpec,
    ScenarioScript,
    SensorSpec,
)
from fusetrack.streams import SensorSchedule

INTR = CameraIntrinsics(fx=200.0, fy=200.0, cx=128.0, cy=96.0, width=256, height=192)
PELVIS_Y = 0.9  # standing pelvis height for a 1.7 m person


def one_screen_scene() -> SceneModel:
    return SceneModel(screens=(
        ScreenRect("wall0", vec3(0, 0, 0), vec3(1, 0, 0), vec3(0, 1, 0),
                   2.0, 1.8, 1920, 1620),
    ))


def wall_cameras(depth_every=0) -> tuple[SensorSpec, SensorSpec]:
    """Two cameras at the screen wall looking into the room."""
    cam_a = SensorSpec("camA", camera_look_at(vec3(0.15, 1.35, 0.15), vec3(1.1, 0.8, 2.4)),
                       INTR, depth_every=depth_every)
    cam_b = SensorSpec("camB", camera_look_at(vec3(1.85, 1.35, 0.15), vec3(0.9, 0.8, 2.4)),
                       INTR, depth_every=depth_every)
    return cam_a, cam_b


def room_cameras(depth_every=0) -> tuple[SensorSpec, SensorSpec]:
    """Two cameras at the back of the room facing the screen wall (both see
    the screen, for scene/inter-sensor calibration)."""
    cam_a = SensorSpec("camA", camera_look_at(vec3(0.4, 1.5, 3.6), vec3(1.0, 0.6, 0.0)),
                       INTR, depth_every=depth_every)
    cam_b = SensorSpec("camB", camera_look_at(vec3(1.8, 1.4, 3.4), vec3(0.9, 0.6, 0.0)),
                       INTR, depth_every=depth_every)
    return cam_a, cam_b


def schedule_for(sensors) -> SensorSchedule:
    return SensorSchedule.evenly_spaced([s.sensor_id for s in sensors])


def occlusion_script(duration_s=30.0, sigma_joint=0.0, seed=7) -> ScenarioScript:
    """Three persons, two sensors, one occluder hiding carol from camB."""
    sensors = wall_cameras()
    persons = (
        PersonSpec(
            name="alice", identity="alice",
            path=((0.0, 0.45, PELVIS_Y, 1.9), (duration_s / 2, 0.65, PELVIS_Y, 2.15),
                  (duration_s, 0.45, PELVIS_Y, 1.9)),
            look_at=(0.5, 1.0, 0.0),
        ),
        PersonSpec(
            name="bob", identity="bob",
            path=((0.0, 1.55, PELVIS_Y, 2.1), (duration_s / 2, 1.4, PELVIS_Y, 2.3),
                  (duration_s, 1.55, PELVIS_Y, 2.1)),
            look_at=(1.5, 1.0, 0.0),
        ),
        PersonSpec(
            name="carol", identity="carol",
            path=((0.0, 0.95, PELVIS_Y, 2.9), (duration_s, 1.0, PELVIS_Y, 2.95)),
            look_at=(1.0, 1.0, 0.0),
        ),
    )
    # box between camB (1.85, 1.35, 0.15) and carol (~0.97, 0..1.8, 2.9),
    # clear of both sight lines to alice and bob
    occluder = BoxSpec(lo=np.array([1.28, 0.0, 1.50]), hi=np.array([1.46, 2.0, 1.70]))
    return ScenarioScript(
        name="occlusion",
        scene=one_screen_scene(),
        schedule=schedule_for(sensors),
        sensors=sensors,
        persons=persons,
        occluders=(occluder,),
        sigma_joint_m=sigma_joint,
        duration_s=duration_s,
        seed=seed,
    )


def calibration_script(n_frames=100, sigma_joint=1e-3, depth_every=30,
                       seed=11) -> ScenarioScript:
    """One walking person seen by two room cameras; screens + a box in the
    shared view provide point-cloud features for ICP refinement."""
    duration_s = n_frames * 33_333 / 1e6 + 0.2
    sensors = room_cameras(depth_every=depth_every)
    person = PersonSpec(
        name="walker", identity="walker",
        path=((0.0, 0.4, PELVIS_Y, 1.6), (duration_s * 0.4, 1.6, PELVIS_Y, 2.4),
              (duration_s * 0.7, 0.9, PELVIS_Y, 1.8), (duration_s, 0.5, PELVIS_Y, 2.2)),
    )
    box = BoxSpec(lo=np.array([0.8, 0.0, 0.8]), hi=np.array([1.3, 0.5, 1.2]))
    return ScenarioScript(
        name="calibration",
        scene=one_screen_scene(),
        schedule=schedule_for(sensors),
        sensors=sensors,
        persons=(person,),
        occluders=(box,),
        sigma_joint_m=sigma_joint,
        duration_s=duration_s,
        seed=seed,
    )


def pointing_script(duration_s=10.0, sigma_joint=0.0, seed=3) -> ScenarioScript:
    """One person pointing at scripted screen targets and gazing at the
    screen; used for target-accuracy measurements."""
    sensors = wall_cameras()
    person = PersonSpec(
        name="alice", identity="alice",
        path=((0.0, 1.0, PELVIS_Y, 2.0), (duration_s, 1.05, PELVIS_Y, 2.05)),
        look_at=(1.0, 1.24, 0.0),  # head-height point on the screen plane
        pointing=(
            PointingSpec(0.5, duration_s / 2, "right", "wall0", 0.5, 0.5),
            PointingSpec(duration_s / 2, duration_s - 0.5, "right", "wall0", 0.25, 0.7),
            PointingSpec(1.0, duration_s - 1.0, "left", "wall0", 0.8, 0.3),
        ),
    )
    return ScenarioScript(
        name="pointing",
        scene=one_screen_scene(),
        schedule=schedule_for(sensors),
        sensors=sensors,
        persons=(person,),
        sigma_joint_m=sigma_joint,
        duration_s=duration_s,
        seed=seed,
    )


def attribution_script(duration_s=12.0, sigma_joint=0.0, seed=5) -> ScenarioScript:
    """Two persons with interleaved scripted gestures for attribution tests."""
    sensors = wall_cameras()
    gestures_a = tuple(
        GestureSpec(t, t + 1.0, "left" if i % 2 == 0 else "right",
                    ("open_palm", "fist")[i % 2])
        for i, t in enumerate(np.arange(0.5, duration_s - 1.0, 2.0)))
    gestures_b = tuple(
        GestureSpec(t, t + 1.0, "right" if i % 2 == 0 else "left",
                    ("point_one", "swipe_left")[i % 2])
        for i, t in enumerate(np.arange(1.5, duration_s - 1.0, 2.0)))
    persons = (
        PersonSpec(name="alice", identity="alice",
                   path=((0.0, 0.55, PELVIS_Y, 2.0), (duration_s, 0.7, PELVIS_Y, 2.1)),
                   look_at=(0.6, 1.0, 0.0), gestures=gestures_a),
        PersonSpec(name="bob", identity="bob",
                   path=((0.0, 1.5, PELVIS_Y, 2.2), (duration_s, 1.35, PELVIS_Y, 2.05)),
                   look_at=(1.4, 1.0, 0.0), gestures=gestures_b),
    )
    return ScenarioScript(
        name="attribution",
        scene=one_screen_scene(),
        schedule=schedule_for(sensors),
        sensors=sensors,
        persons=persons,
        sigma_joint_m=sigma_joint,
        duration_s=duration_s,
        seed=seed,
    )


def true_calibration(script: ScenarioScript):
    """CalibrationSet from the script's true sensor poses (main = first)."""
    from fusetrack.calibration import build_calibration

    main = script.sensors[0]
    edges = []
    for other in script.sensors[1:]:
        edges.append((main.sensor_id, other.sensor_id,
                      main.pose.inverse().compose(other.pose)))
    return build_calibration(main.sensor_id, main.pose, edges)
