"""Timestamped stream plumbing: envelopes, a record/replay session store,
per-sensor capture schedules, and synchronization of skeleton streams to a
common fusion clock.

Session store layout: one directory per session. `manifest.txt` lists the
streams; each stream lives in its own append-only file starting with the
magic bytes "FSES1\n" followed by records of

    u32 LE payload length | u32 LE CRC32(payload) | payload

where the payload is the canonical wire encoding (fusetrack.wire) of
{"t": originating_time_us, "n": sequence, "p": record} so a byte-identical
round trip is guaranteed. The fusion clock ticks once per schedule period,
at the period boundary; every sensor stream is interpolated to the tick.
"""

from __future__ import annotations

import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import wire
from .skeleton import Skeleton, interpolate

MAGIC = b"FSES1\n"
MANIFEST_NAME = "manifest.txt"
DEFAULT_PERIOD_US = 33_333


class StreamError(ValueError):
    pass


class CorruptRecordError(StreamError):
    pass


class UnknownStreamError(StreamError):
    pass


@dataclass(frozen=True)
class Envelope:
    stream_name: str
    originating_time_us: int
    sequence: int
    payload: dict


@dataclass(frozen=True)
class SensorSchedule:
    """Per-sensor capture offsets inside a shared period (time slots)."""

    slots: dict[str, int]
    period_us: int = DEFAULT_PERIOD_US

    def __post_init__(self):
        if self.period_us <= 0:
            raise StreamError("period must be positive")
        offsets = list(self.slots.values())
        if len(set(offsets)) != len(offsets):
            raise StreamError("slot offsets must be distinct")
        for sensor, offset in self.slots.items():
            if not 0 <= offset < self.period_us:
                raise StreamError(f"slot for {sensor} outside [0, period)")

    @staticmethod
    def evenly_spaced(sensor_ids: list[str], period_us: int = DEFAULT_PERIOD_US) -> "SensorSchedule":
        n = max(len(sensor_ids), 1)
        return SensorSchedule(
            slots={s: (i * period_us) // n for i, s in enumerate(sensor_ids)},
            period_us=period_us)

    def capture_times(self, sensor_id: str, duration_us: int) -> list[int]:
        offset = self.slots[sensor_id]
        return list(range(offset, duration_us + 1, self.period_us))


def fusion_ticks(schedule: SensorSchedule, until_us: int, start_us: int = 0):
    """Tick times at period boundaries: period, 2*period, ... <= until_us."""
    k = start_us // schedule.period_us + 1
    t = k * schedule.period_us
    while t <= until_us:
        yield t
        t += schedule.period_us


# ---------------------------------------------------------------------------
# skeleton records
# ---------------------------------------------------------------------------

def skeleton_to_record(s: Skeleton) -> dict:
    return {
        "kind": "skeleton",
        "sensor_id": s.sensor_id,
        "body_id": s.body_id,
        "ts_us": s.timestamp_us,
        "frame": s.frame,
        "positions": s.positions.astype("<f8").tobytes(),
        "confidences": bytes(s.confidences.astype(np.uint8)),
    }


def skeleton_from_record(r: dict) -> Skeleton:
    return Skeleton(
        sensor_id=r["sensor_id"],
        body_id=r["body_id"],
        timestamp_us=r["ts_us"],
        positions=np.frombuffer(r["positions"], dtype="<f8").reshape(-1, 3),
        confidences=np.frombuffer(r["confidences"], dtype=np.uint8),
        frame=r["frame"],
    )


# ---------------------------------------------------------------------------
# session store
# ---------------------------------------------------------------------------

def _stream_filename(stream_name: str) -> str:
    safe = stream_name.replace("/", "_")
    return f"{safe}.fses"


class SessionWriter:
    """Append-only writer; one file per stream plus a text manifest."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._files: dict[str, object] = {}
        self._counts: dict[str, int] = {}
        self._last_time: dict[str, int] = {}

    def append(self, stream_name: str, originating_time_us: int, payload: dict) -> Envelope:
        if stream_name not in self._files:
            fh = open(self.root / _stream_filename(stream_name), "wb")
            fh.write(MAGIC)
            self._files[stream_name] = fh
            self._counts[stream_name] = 0
            self._last_time[stream_name] = -(2**62)
        if originating_time_us < self._last_time[stream_name]:
            raise StreamError(
                f"time went backwards on {stream_name}: "
                f"{originating_time_us} < {self._last_time[stream_name]}")
        seq = self._counts[stream_name]
        blob = wire.encode({"t": originating_time_us, "n": seq, "p": payload})
        fh = self._files[stream_name]
        fh.write(len(blob).to_bytes(4, "little"))
        fh.write(zlib.crc32(blob).to_bytes(4, "little"))
        fh.write(blob)
        self._counts[stream_name] = seq + 1
        self._last_time[stream_name] = originating_time_us
        return Envelope(stream_name, originating_time_us, seq, payload)

    def write_envelopes(self, envelopes) -> None:
        for env in envelopes:
            self.append(env.stream_name, env.originating_time_us, env.payload)

    def close(self) -> None:
        for fh in self._files.values():
            fh.close()
        lines = ["fses-manifest 1"]
        for name in sorted(self._counts):
            lines.append(f"stream {name} {_stream_filename(name)} {self._counts[name]}")
        (self.root / MANIFEST_NAME).write_text("\n".join(lines) + "\n")

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class SessionReader:
    def __init__(self, root: str | Path):
        self.root = Path(root)
        manifest = self.root / MANIFEST_NAME
        if not manifest.exists():
            raise StreamError(f"no manifest at {manifest}")
        self.streams: dict[str, str] = {}
        self.counts: dict[str, int] = {}
        for line in manifest.read_text().splitlines():
            if line.startswith("stream "):
                _, name, filename, count = line.split()
                self.streams[name] = filename
                self.counts[name] = int(count)

    def stream(self, name: str):
        """Envelopes of one stream, in recorded order."""
        if name not in self.streams:
            raise UnknownStreamError(f"stream {name!r} not in manifest")
        path = self.root / self.streams[name]
        with open(path, "rb") as fh:
            if fh.read(len(MAGIC)) != MAGIC:
                raise CorruptRecordError(f"{path} has bad magic")
            seq = 0
            while True:
                header = fh.read(8)
                if not header:
                    break
                if len(header) < 8:
                    raise CorruptRecordError(f"{path}: truncated record header")
                length = int.from_bytes(header[:4], "little")
                crc = int.from_bytes(header[4:], "little")
                blob = fh.read(length)
                if len(blob) < length:
                    raise CorruptRecordError(f"{path}: truncated record body")
                if zlib.crc32(blob) != crc:
                    raise CorruptRecordError(f"{path}: CRC mismatch at record {seq}")
                record = wire.decode(blob)
                yield Envelope(name, record["t"], record["n"], record["p"])
                seq += 1

    def replay(self, names: list[str] | None = None, speed: float | None = None):
        """Merged replay ordered by (originating_time, stream name, sequence).

        speed=None replays as fast as possible; a positive speed paces
        envelopes against the wall clock scaled by that factor.
        """
        chosen = sorted(self.streams) if names is None else names
        envelopes: list[Envelope] = []
        for name in chosen:
            envelopes.extend(self.stream(name))
        envelopes.sort(key=lambda e: (e.originating_time_us, e.stream_name, e.sequence))
        if speed is None:
            yield from envelopes
            return
        if not envelopes:
            return
        wall_start = time.monotonic()
        t0 = envelopes[0].originating_time_us
        for env in envelopes:
            target = (env.originating_time_us - t0) / 1e6 / speed
            delay = target - (time.monotonic() - wall_start)
            if delay > 0:
                time.sleep(delay)
            yield env


# ---------------------------------------------------------------------------
# synchronization to the fusion clock
# ---------------------------------------------------------------------------

@dataclass
class SkeletonBuffer:
    """Recent skeleton samples for one sensor, bracketed per body id.

    Samples older than the processed watermark minus one period are dropped
    on arrival (bounded memory; the drop counter feeds metrics).
    """

    sensor_id: str
    period_us: int = DEFAULT_PERIOD_US
    late_drops: int = 0
    _by_body: dict[int, list[Skeleton]] = field(default_factory=dict)
    _watermark_us: int = -(2**62)

    def add(self, skeleton: Skeleton) -> None:
        if skeleton.timestamp_us < self._watermark_us - self.period_us:
            self.late_drops += 1
            return
        self._by_body.setdefault(skeleton.body_id, []).append(skeleton)

    def advance(self, watermark_us: int, max_gap_us: int) -> None:
        """Prune samples that can no longer bracket any tick >= watermark."""
        self._watermark_us = watermark_us
        horizon = watermark_us - max_gap_us
        for body_id in list(self._by_body):
            samples = self._by_body[body_id]
            keep = 0
            for i, s in enumerate(samples):
                if s.timestamp_us >= horizon:
                    keep = max(0, i - 1)
                    break
            else:
                keep = max(0, len(samples) - 1)
            if samples[-1].timestamp_us < horizon:
                del self._by_body[body_id]
            elif keep:
                self._by_body[body_id] = samples[keep:]

    def at(self, tick_us: int, max_gap_us: int) -> list[Skeleton]:
        """Interpolated sample per body with a valid bracket around the tick."""
        out = []
        for body_id in sorted(self._by_body):
            samples = self._by_body[body_id]
            before = after = None
            for s in samples:
                if s.timestamp_us <= tick_us:
                    before = s
                elif after is None:
                    after = s
                    break
            if before is None:
                continue
            if before.timestamp_us == tick_us:
                out.append(before)
                continue
            if after is None:
                continue
            if after.timestamp_us - before.timestamp_us > max_gap_us:
                continue
            out.append(interpolate(before, after, tick_us, max_gap_us))
        return out


def synchronize(buffers: dict[str, SkeletonBuffer], tick_us: int,
                max_gap_us: int) -> dict[str, list[Skeleton]]:
    """Per sensor, the skeletons interpolated to the tick; silent or
    gap-violating sensors simply contribute an empty list."""
    return {sensor: buffers[sensor].at(tick_us, max_gap_us)
            for sensor in sorted(buffers)}
