import json
from pathlib import Path

import pytest
import yaml

from scenarios import attribution_script, calibration_script

from fusetrack.calibration import load_calibration
from fusetrack.cli import main, read_store_meta
from fusetrack.geometry import transform_error
from fusetrack.simsensor import save_script
from fusetrack.streams import SessionReader

SCENE = Path(__file__).resolve().parent.parent / "scenarios" / "scene.yaml"


@pytest.fixture(scope="module")
def calib_store(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    script_path = root / "calib.yaml"
    save_script(calibration_script(n_frames=100, depth_every=30), script_path)
    store = root / "calib_store"
    assert main(["simulate", str(script_path), str(store)]) == 0
    return store


@pytest.fixture(scope="module")
def event_store(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_events")
    script_path = root / "attr.yaml"
    save_script(attribution_script(duration_s=3.0), script_path)
    store = root / "store"
    assert main(["simulate", str(script_path), str(store)]) == 0
    return store


class TestSimulate:
    def test_store_layout(self, calib_store):
        reader = SessionReader(calib_store)
        assert "meta" in reader.streams
        assert "truth" in reader.streams
        assert "skel.camA" in reader.streams and "skel.camB" in reader.streams
        assert "depth.camA" in reader.streams

    def test_bad_script_exits_nonzero(self, tmp_path, capsys):
        bad = tmp_path / "bad.yaml"
        bad.write_text("scene: {screens: []}\n")
        assert main(["simulate", str(bad), str(tmp_path / "out")]) == 1
        assert "error:" in capsys.readouterr().err


class TestCalibrate:
    def test_calibration_matches_scripted_poses(self, calib_store, tmp_path):
        out = tmp_path / "calib.yaml"
        rc = main(["calibrate", "--store", str(calib_store),
                   "--scene", str(SCENE), "--out", str(out)])
        assert rc == 0
        calib = load_calibration(out)
        reader = SessionReader(calib_store)
        _, sensors, order = read_store_meta(reader)
        true_ab = sensors["camA"][1].inverse().compose(sensors["camB"][1])
        dt, dr = transform_error(calib.main_from_sensor["camB"], true_ab)
        assert dt < 5e-3
        assert dr < 0.5
        # structured report alongside the calibration
        report = json.loads(Path(str(out) + ".report.json").read_text())
        assert "camB" in report["sensors"]

    def test_missing_scene_rejected(self, calib_store, tmp_path, capsys):
        rc = main(["calibrate", "--store", str(calib_store),
                   "--out", str(tmp_path / "c.yaml")])
        assert rc == 1
        assert "scene" in capsys.readouterr().err


class TestRunReplay:
    def test_run_writes_events_and_baseline(self, event_store, tmp_path):
        events_path = tmp_path / "events.ndjson"
        rc = main(["run", "--store", str(event_store), "--scene", str(SCENE),
                   "--calib-from-meta", "--events", str(events_path), "--baseline"])
        assert rc == 0
        lines = events_path.read_text().splitlines()
        assert lines
        first = json.loads(lines[0])
        assert {"person_id", "ts_us", "pointing", "gaze", "gesture", "identity"} \
            <= set(first)
        assert (event_store / "events.sha256").exists()

    def test_replay_check_passes_then_detects_tamper(self, event_store, capsys):
        rc = main(["replay", str(event_store), "--scene", str(SCENE),
                   "--calib-from-meta", "--check"])
        assert rc == 0
        baseline = event_store / "events.sha256"
        original = baseline.read_text()
        baseline.write_text("0" * 64 + "\n")
        rc = main(["replay", str(event_store), "--scene", str(SCENE),
                   "--calib-from-meta", "--check"])
        assert rc == 1
        assert "mismatch" in capsys.readouterr().err
        baseline.write_text(original)

    def test_run_requires_exactly_one_source(self, capsys):
        assert main(["run", "--scene", str(SCENE), "--calib-from-meta"]) == 1
        assert "exactly one" in capsys.readouterr().err

    def test_missing_store_is_one_line_error(self, tmp_path, capsys):
        rc = main(["replay", str(tmp_path / "nope"), "--scene", str(SCENE),
                   "--calib-from-meta"])
        assert rc == 1
        err = capsys.readouterr().err
        assert err.startswith("error:") and err.count("\n") == 1


class TestEval:
    def test_eval_writes_report_and_figures(self, event_store, tmp_path):
        out = tmp_path / "report"
        rc = main(["eval", str(event_store), "--scene", str(SCENE),
                   "--calib-from-meta", "--out", str(out)])
        assert rc == 0
        rows = (out / "report.csv").read_text().splitlines()
        assert rows[0] == "metric,statistic,value"
        metrics = {line.split(",")[0] for line in rows[1:]}
        assert "gaze_error_m" in metrics
        assert "gesture_attribution" in metrics
        assert (out / "gaze_error_cdf.png").exists()
        by_key = {(r.split(",")[0], r.split(",")[1]): float(r.split(",")[2])
                  for r in rows[1:]}
        assert by_key[("gesture_attribution", "accuracy")] == 1.0

    def test_eval_without_truth_fails(self, event_store, tmp_path, capsys):
        # a store without a truth stream: build one by copying sensor streams
        src = SessionReader(event_store)
        from fusetrack.streams import SessionWriter

        bare = tmp_path / "bare"
        with SessionWriter(bare) as writer:
            for name in sorted(src.streams):
                if name == "truth":
                    continue
                for env in src.stream(name):
                    writer.append(env.stream_name, env.originating_time_us, env.payload)
        rc = main(["eval", str(bare), "--scene", str(SCENE),
                   "--calib-from-meta", "--out", str(tmp_path / "r")])
        assert rc == 1
        assert "truth" in capsys.readouterr().err


class TestRunControl:
    def test_stop_select_start_over_gateway(self, tmp_path):
        import json as _json
        import subprocess
        import sys

        from websockets.sync.client import connect

        save_script(attribution_script(duration_s=30.0), tmp_path / "long.yaml")
        save_script(attribution_script(duration_s=1.0), tmp_path / "short.yaml")
        proc = subprocess.Popen(
            [sys.executable, "-u", "-m", "fusetrack.cli", "run",
             "--script", str(tmp_path / "long.yaml"), "--calib-from-meta",
             "--gateway-port", "0", "--speed", "1", "--hold-gateway"],
            stdout=subprocess.PIPE, stderr=subprocess.STDOUT, text=True,
            cwd=tmp_path)
        try:
            port = None
            for line in proc.stdout:
                if "gateway listening" in line:
                    port = int(line.strip().rsplit(":", 1)[1])
                    break
            assert port is not None
            with connect(f"ws://127.0.0.1:{port}", max_size=64_000_000) as ws:
                def read_until(pred, limit=500):
                    for _ in range(limit):
                        msg = ws.recv(timeout=30)
                        if isinstance(msg, bytes):
                            continue
                        obj = _json.loads(msg)
                        if pred(obj):
                            return obj
                    raise AssertionError("frame not seen")

                read_until(lambda o: o.get("type") == "bodies")
                ws.send(_json.dumps({"cmd": "stop"}))
                read_until(lambda o: o.get("type") == "ack" and o.get("cmd") == "stop")
                # queue the short scenario and start it
                ws.send(_json.dumps({"cmd": "select_scenario", "name": "short.yaml"}))
                read_until(lambda o: o.get("type") == "ack"
                           and o.get("cmd") == "select_scenario")
                ws.send(_json.dumps({"cmd": "start"}))
                read_until(lambda o: o.get("type") == "ack" and o.get("cmd") == "start")
                # the second run produces fresh body frames
                read_until(lambda o: o.get("type") == "bodies")
                # bogus scenario is answered with an error frame
                ws.send(_json.dumps({"cmd": "select_scenario", "name": "missing.yaml"}))
                read_until(lambda o: o.get("type") == "error")
        finally:
            proc.kill()
            proc.wait()


class TestConfigFile:
    def test_config_overrides_pipeline_defaults(self, event_store, tmp_path):
        cfg = tmp_path / "config.yaml"
        cfg.write_text(yaml.safe_dump({
            "pipeline": {"crop_interval_ticks": 5},
            "recognizers": {"face": "inproc", "gesture": "inproc"},
        }))
        events_path = tmp_path / "ev.ndjson"
        rc = main(["run", "--store", str(event_store), "--scene", str(SCENE),
                   "--calib-from-meta", "--config", str(cfg),
                   "--events", str(events_path)])
        assert rc == 0

    def test_unknown_config_key_rejected(self, tmp_path, capsys):
        cfg = tmp_path / "config.yaml"
        cfg.write_text("pipeline: {no_such_threshold: 1}\n")
        rc = main(["run", "--store", "x", "--config", str(cfg)])
        assert rc == 1
        assert "no_such_threshold" in capsys.readouterr().err
