"""Operator entry points.

    fusetrack simulate SCRIPT OUT_STORE      render a scenario to a session store
    fusetrack calibrate --store S ...        person-reference + guarded ICP
    fusetrack run --store S | --script F     fusion pipeline (events, gateway)
    fusetrack replay STORE --check           deterministic re-run + hash check
    fusetrack eval STORE --out DIR           accuracy report (CSV + figures)
    fusetrack recognizer --endpoint E        stub recognizer service

Every command is scriptable (no prompts), exits non-zero with a one-line
diagnostic on error, and takes seeds/thresholds from the config file or
flags only.
"""

from __future__ import annotations

import argparse
import json
import sys
import threading
import time
from pathlib import Path

import numpy as np

from . import stub_recognizer, wire
from .calibration import (
    CalibrationError,
    alignment_residual,
    build_calibration,
    calibrate_pair,
    load_calibration,
    load_scene,
    refine_scene_pose,
    save_calibration,
)
from .config import AppConfig, ConfigError, load_config, override
from .gateway import CalibrationSession, GatewayServer, bodies_frame, events_frame
from .geometry import RigidTransform, quat_from_axis_angle
from .pipeline import Pipeline, PipelineConfig
from .pointcloud import PointCloud, depth_to_cloud
from .simsensor import (
    ScenarioError,
    depth_record_to_image,
    load_script,
    run_scenario,
    sensor_meta_from_record,
)
from .streams import (
    SensorSchedule,
    SessionReader,
    SessionWriter,
    StreamError,
    skeleton_from_record,
)

BASELINE_NAME = "events.sha256"


class CliError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# store helpers
# ---------------------------------------------------------------------------

def read_store_meta(reader: SessionReader):
    """(schedule, {sensor_id: (intrinsics, pose_hint)}) from the meta stream."""
    if "meta" not in reader.streams:
        raise CliError("store has no meta stream (not produced by `simulate`?)")
    schedule = None
    sensors: dict[str, tuple] = {}
    order: list[str] = []
    for env in reader.stream("meta"):
        record = env.payload
        if record.get("kind") == "schedule":
            schedule = SensorSchedule(slots={k: int(v) for k, v in record["slots"].items()},
                                      period_us=int(record["period_us"]))
        elif record.get("kind") == "sensor_meta":
            sensor_id, intr, pose = sensor_meta_from_record(record)
            sensors[sensor_id] = (intr, pose)
            order.append(sensor_id)
    if schedule is None:
        raise CliError("store meta stream has no schedule record")
    return schedule, sensors, order


def calibration_from_meta(sensors: dict, order: list[str], main: str | None = None):
    """Exact calibration from the store's pose hints (simulator convenience)."""
    main = main or order[0]
    if main not in sensors:
        raise CliError(f"main sensor {main!r} not in store meta")
    world_from_main = sensors[main][1]
    edges = []
    for sensor_id in order:
        if sensor_id == main:
            continue
        edges.append((main, sensor_id,
                      world_from_main.inverse().compose(sensors[sensor_id][1])))
    return build_calibration(main, world_from_main, edges)


def longest_tracks(reader: SessionReader) -> dict[str, list]:
    """Per sensor, the longest contiguous (body_id) skeleton track."""
    tracks: dict[str, dict[int, list]] = {}
    for name in reader.streams:
        if not name.startswith("skel."):
            continue
        sensor_id = name[len("skel."):]
        per_body: dict[int, list] = {}
        for env in reader.stream(name):
            skel = skeleton_from_record(env.payload)
            per_body.setdefault(skel.body_id, []).append(skel)
        tracks[sensor_id] = per_body
    out = {}
    for sensor_id, per_body in tracks.items():
        if per_body:
            best = max(per_body.values(), key=len)
            out[sensor_id] = best
    return out


def latest_clouds(reader: SessionReader, sensors: dict, stride: int = 4):
    clouds: dict[str, PointCloud] = {}
    for name in reader.streams:
        if not name.startswith("depth."):
            continue
        sensor_id = name[len("depth."):]
        last = None
        for env in reader.stream(name):
            last = env.payload
        if last is not None and sensor_id in sensors:
            intr = sensors[sensor_id][0]
            clouds[sensor_id] = depth_to_cloud(depth_record_to_image(last), intr,
                                               stride=stride)
    return clouds


def build_recognizers(face: str, gesture: str, timeout_s: float) -> dict:
    clients: dict[str, object] = {}
    shared_inproc = None
    for service, spec in (("face", face), ("gesture", gesture)):
        if spec == "none":
            continue
        if spec == "inproc":
            if shared_inproc is None:
                shared_inproc = wire.InProcessClient(stub_recognizer.make_handler())
            clients[service] = shared_inproc
        else:
            clients[service] = wire.RecognizerClient(spec, timeout_s=timeout_s)
    return clients


def perturbed(pose: RigidTransform, magnitude_m: float, seed: int = 0) -> RigidTransform:
    if magnitude_m <= 0:
        return pose
    rng = np.random.default_rng(seed)
    axis = rng.normal(size=3)
    nudge = RigidTransform(
        quat_from_axis_angle(axis, magnitude_m),  # radians ~ metres: small
        rng.normal(size=3) * magnitude_m / np.sqrt(3))
    return nudge.compose(pose)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    script = load_script(args.script)
    out = run_scenario(script)
    out.write_session(args.out)
    total = sum(len(v) for v in out.streams.values())
    print(f"simulated '{script.name}': {script.duration_s:.1f}s, "
          f"{len(out.streams)} streams, {total} envelopes, "
          f"{len(out.truth.ticks)} truth ticks -> {args.out}")
    return 0


def cmd_calibrate(args) -> int:
    cfg = override(load_config(args.config), scene=args.scene)
    if cfg.scene is None:
        raise CliError("calibrate needs --scene")
    scene = load_scene(cfg.scene)
    reader = SessionReader(args.store)
    schedule, sensors, order = read_store_meta(reader)
    main = args.main or order[0]
    if main not in sensors:
        raise CliError(f"main sensor {main!r} not in store")
    tracks = longest_tracks(reader)
    clouds = latest_clouds(reader, sensors, stride=args.cloud_stride)

    if main in clouds:
        hint = sensors[main][1]
        scene_fit = refine_scene_pose(clouds[main], hint, scene, params=cfg.icp)
        before, _ = alignment_residual(clouds[main], hint, scene)
        after, _ = alignment_residual(clouds[main], scene_fit.transform, scene)
        # strict margin: a good hint must not be displaced by the ICP
        # sampling floor (a single planar screen leaves in-plane motion
        # weakly constrained)
        if after < before - 1e-4:
            world_from_main = scene_fit.transform
            scene_note = (f"scene ICP accepted: plane rmse "
                          f"{before * 1000:.2f} -> {after * 1000:.2f} mm "
                          f"({scene_fit.iterations} iters)")
        else:
            world_from_main = hint
            scene_note = (f"scene ICP rejected (plane rmse {before * 1000:.2f} -> "
                          f"{after * 1000:.2f} mm); keeping mount pose hint")
    else:
        world_from_main = sensors[main][1]
        scene_note = "no depth cloud for main sensor; using mount pose hint"

    edges = []
    residuals = {}
    details = {}
    for sensor_id in order:
        if sensor_id == main:
            continue
        if main not in tracks or sensor_id not in tracks:
            raise CliError(f"no skeleton track for {main!r} or {sensor_id!r} in store")
        pair = calibrate_pair(tracks[main], tracks[sensor_id],
                              clouds.get(main), clouds.get(sensor_id),
                              icp_params=cfg.icp)
        edges.append((main, sensor_id, pair.transform))
        residual = (pair.validation_refined_m if pair.refinement_accepted
                    else pair.validation_coarse_m)
        residuals[sensor_id] = 0.0 if np.isnan(residual) else float(residual)
        details[sensor_id] = pair

    calib = build_calibration(main, world_from_main, edges, residuals=residuals)
    save_calibration(calib, args.out)

    report = {"main_sensor": main, "scene": scene_note, "sensors": {}}
    print(f"main sensor {main}: {scene_note}")
    for sensor_id, pair in details.items():
        line = (f"sensor {sensor_id}: validation rmse "
                f"coarse {pair.validation_coarse_m * 1000:.2f} mm / "
                f"refined {pair.validation_refined_m * 1000:.2f} mm, "
                f"icp_refinement_accepted={pair.refinement_accepted}")
        print(line)
        report["sensors"][sensor_id] = {
            "validation_coarse_m": pair.validation_coarse_m,
            "validation_refined_m": pair.validation_refined_m,
            "refinement_accepted": pair.refinement_accepted,
        }
    report_path = Path(str(args.out) + ".report.json")
    report_path.write_text(json.dumps(report, sort_keys=True, indent=2,
                                      default=float))
    print(f"calibration written to {args.out} (report: {report_path})")
    return 0


def _event_sink(path: str | None):
    if path is None or path == "-":
        return None
    return open(path, "w")


def _scenario_source(script_path: str, record_to: str | None):
    """(envelopes, schedule, scene, sensors, order) for a scenario script."""
    script = load_script(script_path)
    out = run_scenario(script)
    sensors = {}
    order = []
    for env in out.streams.get("meta", []):
        if env.payload.get("kind") == "sensor_meta":
            sensor_id, intr, pose = sensor_meta_from_record(env.payload)
            sensors[sensor_id] = (intr, pose)
            order.append(sensor_id)
    if record_to is not None:
        out.write_session(record_to)
        print(f"session recorded to {record_to}")
    return out.all_envelopes(), script.schedule, script.scene, sensors, order


def cmd_run(args) -> int:
    cfg = override(load_config(args.config),
                   scene=args.scene, calibration=args.calib,
                   store=args.store, script=args.script,
                   events_out=args.events, gateway_port=args.gateway_port,
                   face_recognizer=args.face_recognizer,
                   gesture_recognizer=args.gesture_recognizer)
    if (cfg.store is None) == (cfg.script is None):
        raise CliError("run needs exactly one of --store or --script")

    if cfg.script is not None:
        envelopes, schedule, script_scene, sensors, order = _scenario_source(
            cfg.script, args.record)
        scene = script_scene if cfg.scene is None else load_scene(cfg.scene)
    else:
        reader = SessionReader(cfg.store)
        schedule, sensors, order = read_store_meta(reader)
        if cfg.scene is None:
            raise CliError("run --store needs --scene (or a config with one)")
        scene = load_scene(cfg.scene)
        names = [n for n in sorted(reader.streams) if n != "truth"]
        envelopes = reader.replay(names=names, speed=args.speed)

    if args.calib_from_meta:
        calib = calibration_from_meta(sensors, order, args.main)
    elif cfg.calibration is not None:
        calib = load_calibration(cfg.calibration)
    else:
        raise CliError("run needs --calib FILE or --calib-from-meta")

    recognizers = build_recognizers(cfg.face_recognizer, cfg.gesture_recognizer,
                                    cfg.pipeline.request_timeout_s)

    # run control, driven by gateway commands: stop ends the current feed,
    # start launches the next run while the gateway is held open, and
    # select_scenario queues another script (script mode only)
    stop_event = threading.Event()
    start_event = threading.Event()
    pending: dict[str, str] = {}

    def ctl_stop() -> None:
        stop_event.set()

    def ctl_start() -> None:
        start_event.set()

    def ctl_select(name: str) -> None:
        if cfg.script is None:
            raise CliError("select_scenario is only available in --script mode")
        path = Path(name)
        if not path.is_absolute():
            path = Path(cfg.script).parent / name
        if not path.exists():
            raise CliError(f"no scenario at {path}")
        pending["script"] = str(path)

    gateway = None
    session = None
    if cfg.gateway_port is not None:
        main = args.main or order[0]
        session = CalibrationSession(scene=scene, main_sensor_id=main,
                                     icp_params=cfg.icp)
        for sensor_id in order:
            session.set_pose(sensor_id,
                             perturbed(sensors[sensor_id][1], args.pose_error,
                                       seed=hash(sensor_id) % (2**31)))
        gateway = GatewayServer(port=cfg.gateway_port, session=session,
                                save_dir=Path(args.save_dir or "."),
                                controls={"stop": ctl_stop, "start": ctl_start,
                                          "select_scenario": ctl_select}).start()
        print(f"gateway listening on ws://127.0.0.1:{gateway.port}")

    sink = _event_sink(cfg.events_out)
    intrinsics = {s: meta[0] for s, meta in sensors.items()}

    def on_tick(pipe, tick_us, events, views):
        if gateway is None:
            return
        gateway.broadcast_json(bodies_frame(tick_us, pipe.tracker.live))
        if events:
            gateway.broadcast_json(events_frame(tick_us, events))
        if session is not None:
            for sensor_id, record in pipe.depth_records.items():
                frame_ts = record["ts_us"]
                if session.cloud_timestamps.get(sensor_id) != frame_ts:
                    cloud = depth_to_cloud(depth_record_to_image(record),
                                           intrinsics[sensor_id], stride=2)
                    session.set_cloud(sensor_id, cloud)
                    session.cloud_timestamps[sensor_id] = frame_ts
                    gateway.broadcast_cloud(sensor_id, cloud)
                    gateway.broadcast_json(gateway._residual_frame(sensor_id))

    def stoppable(feed):
        for env in feed:
            if stop_event.is_set():
                break
            yield env

    pipe = Pipeline(scene, calib, schedule, cfg.pipeline, recognizers,
                    on_tick=on_tick)
    count = 0
    try:
        while True:
            for event in pipe.run(stoppable(envelopes)):
                count += 1
                if sink is not None:
                    sink.write(event.to_json() + "\n")
            print(f"run {'stopped' if stop_event.is_set() else 'finished'}; "
                  f"{count} events so far", flush=True)
            if gateway is None or not args.hold_gateway:
                if "script" not in pending:
                    break
            else:
                print("gateway held open (start / select_scenario / ctrl-c)",
                      flush=True)
                while "script" not in pending and not start_event.wait(timeout=0.2):
                    pass
            start_event.clear()
            stop_event.clear()
            if cfg.script is not None:
                next_script = pending.pop("script", cfg.script)
                envelopes, schedule, script_scene, sensors, order = _scenario_source(
                    next_script, None)
                scene = script_scene if cfg.scene is None else scene
                intrinsics.clear()
                intrinsics.update({s: meta[0] for s, meta in sensors.items()})
                if args.calib_from_meta:
                    calib = calibration_from_meta(sensors, order, args.main)
            else:
                # store mode: start replays the same session again
                envelopes = reader.replay(names=names, speed=args.speed)
            pipe = Pipeline(scene, calib, schedule, cfg.pipeline, recognizers,
                            on_tick=on_tick)
    except KeyboardInterrupt:
        pass
    finally:
        if sink is not None:
            sink.close()
        for client in {id(c): c for c in recognizers.values()}.values():
            client.close()
        if gateway is not None:
            gateway.stop()

    digest = pipe.event_hash()
    if args.baseline:
        target = Path(cfg.store if cfg.store else args.record or ".")
        (target / BASELINE_NAME).write_text(digest + "\n")
        print(f"baseline written to {target / BASELINE_NAME}")
    print(f"emitted {count} events; hash {digest}")
    print("counters: " + json.dumps(pipe.counters, sort_keys=True))
    return 0


def cmd_replay(args) -> int:
    cfg = override(load_config(args.config), scene=args.scene, calibration=args.calib)
    reader = SessionReader(args.store)
    schedule, sensors, order = read_store_meta(reader)
    if cfg.scene is None:
        raise CliError("replay needs --scene")
    scene = load_scene(cfg.scene)
    if args.calib_from_meta:
        calib = calibration_from_meta(sensors, order, args.main)
    elif cfg.calibration is not None:
        calib = load_calibration(cfg.calibration)
    else:
        raise CliError("replay needs --calib FILE or --calib-from-meta")
    recognizers = build_recognizers(cfg.face_recognizer, cfg.gesture_recognizer,
                                    cfg.pipeline.request_timeout_s)
    names = [n for n in sorted(reader.streams) if n != "truth"]
    pipe = Pipeline(scene, calib, schedule, cfg.pipeline, recognizers)
    count = sum(1 for _ in pipe.run(reader.replay(names=names)))
    for client in {id(c): c for c in recognizers.values()}.values():
        client.close()
    digest = pipe.event_hash()
    print(f"replayed {count} events; hash {digest}")
    baseline_path = Path(args.store) / BASELINE_NAME
    if args.write_baseline:
        baseline_path.write_text(digest + "\n")
        print(f"baseline written to {baseline_path}")
    if args.check:
        if not baseline_path.exists():
            print(f"error: no baseline at {baseline_path}", file=sys.stderr)
            return 2
        expected = baseline_path.read_text().strip()
        if digest != expected:
            print(f"error: hash mismatch: {digest} != baseline {expected}",
                  file=sys.stderr)
            return 1
        print("baseline check OK")
    return 0


def cmd_eval(args) -> int:
    from .report import (add_calibration_errors, evaluate_events, format_summary,
                         write_report)
    from .simsensor import GroundTruth

    cfg = override(load_config(args.config), scene=args.scene, calibration=args.calib)
    reader = SessionReader(args.store)
    schedule, sensors, order = read_store_meta(reader)
    if "truth" not in reader.streams:
        raise CliError("store has no truth stream; eval needs a simulated session")
    if cfg.scene is None:
        raise CliError("eval needs --scene")
    scene = load_scene(cfg.scene)
    if args.calib_from_meta:
        calib = calibration_from_meta(sensors, order, args.main)
    elif cfg.calibration is not None:
        calib = load_calibration(cfg.calibration)
    else:
        raise CliError("eval needs --calib FILE or --calib-from-meta")
    recognizers = build_recognizers("inproc", "inproc",
                                    cfg.pipeline.request_timeout_s)
    names = [n for n in sorted(reader.streams) if n != "truth"]
    pipe = Pipeline(scene, calib, schedule, cfg.pipeline, recognizers)
    events = list(pipe.run(reader.replay(names=names)))
    truth = GroundTruth.from_records(env.payload for env in reader.stream("truth"))
    report = evaluate_events(events, truth, schedule.period_us)
    add_calibration_errors(report, calib,
                           {s: meta[1] for s, meta in sensors.items()})
    written = write_report(report, args.out)
    print(format_summary(report))
    print("report files: " + ", ".join(str(p) for p in written))
    return 0


def cmd_recognizer(args) -> int:
    return stub_recognizer.main(["--endpoint", args.endpoint,
                                 "--latency-ms", str(args.latency_ms)])


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fusetrack",
        description="multi-sensor body-tracking fusion pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="render a scenario script to a session store")
    p.add_argument("script", help="scenario YAML")
    p.add_argument("out", help="output session store directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("calibrate", help="multi-sensor calibration from a store")
    p.add_argument("--store", required=True)
    p.add_argument("--scene", help="scene YAML (screens)")
    p.add_argument("--out", required=True, help="output calibration YAML")
    p.add_argument("--main", help="main sensor id (default: first in store)")
    p.add_argument("--cloud-stride", type=int, default=4)
    p.add_argument("--config")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("run", help="run the fusion pipeline")
    p.add_argument("--store", help="replay a session store")
    p.add_argument("--script", help="or run a scenario live")
    p.add_argument("--scene")
    p.add_argument("--calib")
    p.add_argument("--calib-from-meta", action="store_true",
                   help="use the store's true mount poses (simulator only)")
    p.add_argument("--main")
    p.add_argument("--events", help="NDJSON event output path")
    p.add_argument("--record", help="record the live session to this store")
    p.add_argument("--baseline", action="store_true",
                   help="write the event hash next to the store")
    p.add_argument("--gateway-port", type=int, help="serve the UI gateway")
    p.add_argument("--pose-error", type=float, default=0.0,
                   help="perturb gateway session poses (test harness)")
    p.add_argument("--save-dir", help="directory for gateway save_calibration")
    p.add_argument("--hold-gateway", action="store_true",
                   help="keep serving the gateway after the run ends")
    p.add_argument("--speed", type=float, default=None,
                   help="replay pacing (default: as fast as possible)")
    p.add_argument("--face-recognizer", help="inproc | none | tcp://host:port")
    p.add_argument("--gesture-recognizer", help="inproc | none | tcp://host:port")
    p.add_argument("--config")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("replay", help="deterministic re-run of a recorded session")
    p.add_argument("store")
    p.add_argument("--scene")
    p.add_argument("--calib")
    p.add_argument("--calib-from-meta", action="store_true")
    p.add_argument("--main")
    p.add_argument("--check", action="store_true",
                   help="compare the event hash against the stored baseline")
    p.add_argument("--write-baseline", action="store_true")
    p.add_argument("--config")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("eval", help="accuracy report against simulator truth")
    p.add_argument("store")
    p.add_argument("--scene")
    p.add_argument("--calib")
    p.add_argument("--calib-from-meta", action="store_true")
    p.add_argument("--main")
    p.add_argument("--out", required=True, help="report output directory")
    p.add_argument("--config")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("recognizer", help="stub recognizer service")
    p.add_argument("--endpoint", default="tcp://127.0.0.1:7601")
    p.add_argument("--latency-ms", type=float, default=0.0)
    p.set_defaults(func=cmd_recognizer)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ConfigError, CalibrationError, ScenarioError, StreamError,
            wire.WireError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
