"""Accuracy evaluation against simulator ground truth.

Produces percentile statistics for pointing/gaze target errors, gesture
attribution accuracy, and calibration error versus the scripted sensor
poses; writes a CSV of all metrics plus error-distribution figures next to
it (matplotlib, file output only).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .calibration import CalibrationSet  # noqa: E402
from .geometry import RigidTransform, transform_error  # noqa: E402
from .pipeline import BehaviourEvent  # noqa: E402
from .simsensor import GroundTruth  # noqa: E402


@dataclass
class EvalReport:
    pointing_errors_m: list[float] = field(default_factory=list)
    gaze_errors_m: list[float] = field(default_factory=list)
    gesture_total: int = 0
    gesture_correct: int = 0
    identity_total: int = 0
    identity_correct: int = 0
    calibration_errors: dict[str, tuple[float, float]] = field(default_factory=dict)
    event_count: int = 0
    tick_count: int = 0

    def percentiles(self, values: list[float]) -> dict[str, float]:
        if not values:
            return {}
        arr = np.asarray(values)
        return {
            "p50": float(np.percentile(arr, 50)),
            "p90": float(np.percentile(arr, 90)),
            "p95": float(np.percentile(arr, 95)),
            "max": float(arr.max()),
            "count": float(len(arr)),
        }

    @property
    def attribution_accuracy(self) -> float | None:
        if self.gesture_total == 0:
            return None
        return self.gesture_correct / self.gesture_total

    def rows(self) -> list[tuple[str, str, float]]:
        out: list[tuple[str, str, float]] = []
        for metric, values in (("pointing_error_m", self.pointing_errors_m),
                               ("gaze_error_m", self.gaze_errors_m)):
            for name, value in self.percentiles(values).items():
                out.append((metric, name, value))
        if self.gesture_total:
            out.append(("gesture_attribution", "accuracy",
                        self.gesture_correct / self.gesture_total))
            out.append(("gesture_attribution", "count", float(self.gesture_total)))
        if self.identity_total:
            out.append(("identity_attribution", "accuracy",
                        self.identity_correct / self.identity_total))
        for sensor, (dt, dr) in sorted(self.calibration_errors.items()):
            out.append((f"calibration.{sensor}", "translation_m", dt))
            out.append((f"calibration.{sensor}", "rotation_deg", dr))
        out.append(("run", "events", float(self.event_count)))
        out.append(("run", "ticks", float(self.tick_count)))
        return out


def evaluate_events(events: list[BehaviourEvent], truth: GroundTruth,
                    period_us: int) -> EvalReport:
    """Score behaviour events against scripted truth.

    Person identity comes from the events themselves (face recognition);
    events whose person never gets an identity cannot be scored and are
    skipped.
    """
    report = EvalReport()
    truth_by_tick = {t.tick_us: t for t in truth.ticks}
    name_of: dict[int, str] = {}
    for event in events:
        if event.identity is not None:
            name_of[event.person_id] = event.identity[0]
    ticks = set()
    for event in events:
        ticks.add(event.timestamp_us)
        tick_truth = truth_by_tick.get(event.timestamp_us)
        if tick_truth is None:
            continue
        name = name_of.get(event.person_id)
        if name is None or name not in tick_truth.persons:
            continue
        person = tick_truth.persons[name]
        for hand in ("left", "right"):
            target = person.pointing[hand]
            hit = event.pointing.get(hand)
            if target is not None and hit is not None:
                report.pointing_errors_m.append(
                    float(np.linalg.norm(hit.point - target[3])))
        if person.gaze is not None and event.gaze is not None:
            report.gaze_errors_m.append(
                float(np.linalg.norm(event.gaze.point - person.gaze[3])))
        prev_truth = truth_by_tick.get(event.timestamp_us - period_us)
        for hand in ("left", "right"):
            got = event.gesture.get(hand)
            if got is None:
                continue
            report.gesture_total += 1
            accept = {person.gestures[hand]}
            if prev_truth is not None and name in prev_truth.persons:
                accept.add(prev_truth.persons[name].gestures[hand])
            if got[0] in accept:
                report.gesture_correct += 1
        if event.identity is not None:
            report.identity_total += 1
            if event.identity[0] == person.identity:
                report.identity_correct += 1
    report.event_count = len(events)
    report.tick_count = len(ticks)
    return report


def add_calibration_errors(report: EvalReport, calib: CalibrationSet,
                           true_poses: dict[str, RigidTransform]) -> None:
    for sensor, true_pose in sorted(true_poses.items()):
        if sensor in calib.main_from_sensor:
            report.calibration_errors[sensor] = transform_error(
                calib.world_from_sensor(sensor), true_pose)


def write_report(report: EvalReport, out_dir: str | Path) -> list[Path]:
    """report.csv plus error-distribution figures; returns written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    csv_path = out / "report.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "statistic", "value"])
        for row in report.rows():
            writer.writerow(row)
    written.append(csv_path)

    for name, values, colour in (("pointing", report.pointing_errors_m, "tab:blue"),
                                 ("gaze", report.gaze_errors_m, "tab:orange")):
        if not values:
            continue
        fig, ax = plt.subplots(figsize=(5, 3.2))
        arr = np.sort(np.asarray(values))
        ax.plot(arr * 1000.0, np.linspace(0, 1, len(arr)), color=colour)
        ax.axhline(0.95, color="grey", lw=0.6, ls="--")
        ax.set_xlabel(f"{name} target error (mm)")
        ax.set_ylabel("CDF")
        ax.set_title(f"{name} error distribution (n={len(arr)})")
        fig.tight_layout()
        path = out / f"{name}_error_cdf.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written


def format_summary(report: EvalReport) -> str:
    lines = []
    for metric, stat, value in report.rows():
        lines.append(f"{metric}.{stat} {value:.6g}")
    return "\n".join(lines)
