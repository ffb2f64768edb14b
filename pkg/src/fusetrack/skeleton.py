"""Skeleton data model, temporal interpolation, cross-sensor matching and
merging into a single stream of tracked persons.

Matching uses mean joint distance over mutually-confident joints and an
exact minimum-cost assignment per sensor pair (input sizes are tiny, so
exactness is free), transitively closed across sensors. Merging is a
confidence-weighted average so a person partially occluded from one camera
degrades gracefully instead of flipping between sensors.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import IntEnum

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import RigidTransform

JOINT_COUNT = 15


class JointId(IntEnum):
    PELVIS = 0
    SPINE = 1
    CHEST = 2
    NECK = 3
    HEAD = 4
    LEFT_SHOULDER = 5
    LEFT_ELBOW = 6
    LEFT_WRIST = 7
    LEFT_HAND = 8
    RIGHT_SHOULDER = 9
    RIGHT_ELBOW = 10
    RIGHT_WRIST = 11
    RIGHT_HAND = 12
    LEFT_HIP = 13
    RIGHT_HIP = 14


class Confidence(IntEnum):
    NONE = 0
    LOW = 1
    MEDIUM = 2
    HIGH = 3


# averaging weights per confidence level, biased toward high confidence
MERGE_WEIGHTS = np.array([0.0, 1.0, 2.0, 4.0])

SENSOR_FRAME = "sensor"
WORLD_FRAME = "world"

DEFAULT_MAX_GAP_US = 200_000


class SkeletonError(ValueError):
    pass


class GapTooLargeError(SkeletonError):
    pass


class MismatchedBodyError(SkeletonError):
    pass


class TimestampOutOfRangeError(SkeletonError):
    pass


class EmptySetError(SkeletonError):
    pass


@dataclass(frozen=True, eq=False)
class Skeleton:
    """One tracked body from one sensor at one capture time."""

    sensor_id: str
    body_id: int
    timestamp_us: int
    positions: np.ndarray     # (15, 3) metres
    confidences: np.ndarray   # (15,) Confidence values
    frame: str = SENSOR_FRAME

    def __post_init__(self):
        p = np.asarray(self.positions, dtype=np.float64).reshape(JOINT_COUNT, 3)
        c = np.asarray(self.confidences, dtype=np.int8).reshape(JOINT_COUNT)
        if not np.all(np.isfinite(p)):
            raise SkeletonError("joint positions must be finite")
        if np.any(c < 0) or np.any(c > 3):
            raise SkeletonError("confidences must be in 0..3")
        object.__setattr__(self, "positions", p)
        object.__setattr__(self, "confidences", c)

    def joint(self, j: JointId) -> np.ndarray:
        return self.positions[int(j)]

    def confidence(self, j: JointId) -> Confidence:
        return Confidence(int(self.confidences[int(j)]))

    def to_world(self, world_from_sensor: RigidTransform) -> "Skeleton":
        if self.frame == WORLD_FRAME:
            return self
        return replace(self, positions=world_from_sensor.apply(self.positions),
                       frame=WORLD_FRAME)


@dataclass(eq=False)
class MergedBody:
    """Cross-sensor fusion of one physical person at one fusion tick."""

    person_id: int | None
    timestamp_us: int
    positions: np.ndarray
    confidences: np.ndarray
    contributors: tuple[tuple[str, int], ...]
    identity_label: str | None = None
    identity_confidence: float | None = None

    def __post_init__(self):
        if not self.contributors:
            raise EmptySetError("merged body needs at least one contributor")
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(JOINT_COUNT, 3)
        self.confidences = np.asarray(self.confidences, dtype=np.int8).reshape(JOINT_COUNT)

    def joint(self, j: JointId) -> np.ndarray:
        return self.positions[int(j)]

    def confidence(self, j: JointId) -> Confidence:
        return Confidence(int(self.confidences[int(j)]))

    @property
    def pelvis(self) -> np.ndarray:
        return self.positions[JointId.PELVIS]


def interpolate(a: Skeleton, b: Skeleton, t_us: int,
                max_gap_us: int = DEFAULT_MAX_GAP_US) -> Skeleton:
    """Linear per-joint interpolation between two samples of the same body.

    Exact endpoints return the endpoint sample verbatim; strictly between,
    confidences take the per-joint minimum of the two samples.
    """
    if (a.sensor_id, a.body_id) != (b.sensor_id, b.body_id):
        raise MismatchedBodyError(
            f"({a.sensor_id},{a.body_id}) vs ({b.sensor_id},{b.body_id})")
    if not a.timestamp_us <= t_us <= b.timestamp_us:
        raise TimestampOutOfRangeError(
            f"t={t_us} outside [{a.timestamp_us}, {b.timestamp_us}]")
    if t_us == a.timestamp_us:
        return a
    if t_us == b.timestamp_us:
        return b
    gap = b.timestamp_us - a.timestamp_us
    if gap > max_gap_us:
        raise GapTooLargeError(f"gap {gap} us exceeds max {max_gap_us} us")
    lam = (t_us - a.timestamp_us) / gap
    return Skeleton(
        sensor_id=a.sensor_id,
        body_id=a.body_id,
        timestamp_us=t_us,
        positions=(1.0 - lam) * a.positions + lam * b.positions,
        confidences=np.minimum(a.confidences, b.confidences),
        frame=a.frame,
    )


def skeleton_distance(a: Skeleton, b: Skeleton) -> float | None:
    """Mean joint distance over joints both sides report with confidence >= low.

    None (undefined) when fewer than 3 joints are common; such pairs never
    match.
    """
    both = (a.confidences >= Confidence.LOW) & (b.confidences >= Confidence.LOW)
    if int(both.sum()) < 3:
        return None
    d = np.linalg.norm(a.positions[both] - b.positions[both], axis=1)
    return float(np.mean(d))


_BIG_COST = 1e9


def match_skeletons(groups: list[list[Skeleton]], threshold: float) -> list[list[Skeleton]]:
    """Partition world-frame skeletons from several sensors into person sets.

    Per sensor pair, solves the exact minimum-cost one-to-one assignment
    (maximizing the number of below-threshold matches first), then closes the
    matches transitively across sensors. Every input skeleton appears in
    exactly one output set; unmatched ones come back as singletons.
    """
    items: list[tuple[int, int]] = [(gi, si) for gi, group in enumerate(groups)
                                    for si in range(len(group))]
    if not items:
        return []
    parent = {key: key for key in items}

    def find(k):
        while parent[k] != k:
            parent[k] = parent[parent[k]]
            k = parent[k]
        return k

    def union(a, b):
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)

    for gi in range(len(groups)):
        for gj in range(gi + 1, len(groups)):
            ga, gb = groups[gi], groups[gj]
            if not ga or not gb:
                continue
            cost = np.full((len(ga), len(gb)), _BIG_COST)
            for i, a in enumerate(ga):
                for j, b in enumerate(gb):
                    d = skeleton_distance(a, b)
                    if d is not None and d <= threshold:
                        cost[i, j] = d
            rows, cols = linear_sum_assignment(cost)
            for r, c in zip(rows, cols):
                if cost[r, c] < _BIG_COST:
                    union((gi, r), (gj, c))

    clusters: dict[tuple[int, int], list[tuple[int, int]]] = {}
    for key in items:
        clusters.setdefault(find(key), []).append(key)
    out = []
    for root in sorted(clusters):
        out.append([groups[gi][si] for gi, si in sorted(clusters[root])])
    return out


def merge(skeletons: list[Skeleton], prev: MergedBody | None = None) -> MergedBody:
    """Fuse a matched set into one body by confidence-weighted averaging.

    Joint confidence in the output is the max over contributors; joints with
    zero total weight get confidence none. The person id (and any identity)
    is inherited from `prev`; and stays unassigned otherwise until the
    tracker allocates one.
    """
    if not skeletons:
        raise EmptySetError("cannot merge an empty set")
    ts = skeletons[0].timestamp_us
    weights = np.stack([MERGE_WEIGHTS[s.confidences] for s in skeletons])   # (k, 15)
    positions = np.stack([s.positions for s in skeletons])                  # (k, 15, 3)
    total = weights.sum(axis=0)                                             # (15,)
    safe = np.where(total > 0, total, 1.0)
    fused = np.einsum("kj,kjc->jc", weights, positions) / safe[:, None]
    confidences = np.max(np.stack([s.confidences for s in skeletons]), axis=0)
    confidences = np.where(total > 0, confidences, Confidence.NONE)
    contributors = tuple(sorted((s.sensor_id, s.body_id) for s in skeletons))
    return MergedBody(
        person_id=prev.person_id if prev is not None else None,
        timestamp_us=ts,
        positions=fused,
        confidences=confidences,
        contributors=contributors,
        identity_label=prev.identity_label if prev is not None else None,
        identity_confidence=prev.identity_confidence if prev is not None else None,
    )


def track_persons(current: list[MergedBody], previous: list[MergedBody],
                  dt_us: int, allocate=None, gate_base_m: float = 0.5,
                  gate_speed_mps: float = 1.0) -> list[MergedBody]:
    """Associate fresh candidates to previously tracked bodies by pelvis
    distance (greedy nearest within a speed-scaled gate); unmatched
    candidates get freshly allocated person ids.

    Pure association step: retirement timeouts and identity re-binding live
    in the pipeline's tracker, which calls this.
    """
    pairs = []
    for ci, cand in enumerate(current):
        for prev in previous:
            # coasting bodies (seen several ticks ago) get a wider gate
            elapsed = max(dt_us, cand.timestamp_us - prev.timestamp_us, 0)
            gate = gate_base_m + gate_speed_mps * elapsed / 1e6
            d = float(np.linalg.norm(cand.pelvis - prev.pelvis))
            if d <= gate:
                pairs.append((d, prev.person_id, ci))
    pairs.sort(key=lambda p: (p[0], p[1], p[2]))
    taken_prev: set[int] = set()
    taken_cand: set[int] = set()
    out: list[MergedBody] = [None] * len(current)  # type: ignore[list-item]
    by_id = {p.person_id: p for p in previous}
    for d, pid, ci in pairs:
        if pid in taken_prev or ci in taken_cand:
            continue
        taken_prev.add(pid)
        taken_cand.add(ci)
        prev = by_id[pid]
        cand = current[ci]
        cand.person_id = pid
        if cand.identity_label is None:
            cand.identity_label = prev.identity_label
            cand.identity_confidence = prev.identity_confidence
        out[ci] = cand
    for ci, cand in enumerate(current):
        if ci not in taken_cand:
            cand.person_id = allocate() if allocate is not None else None
            out[ci] = cand
    return [b for b in out if b is not None]


@dataclass
class PersonTracker:
    """Owns person-id stability across ticks: association, retirement, and
    re-binding of retired ids through face identity."""

    lost_timeout_us: int = 2_000_000
    gate_base_m: float = 0.5
    gate_speed_mps: float = 1.0
    _next_id: int = 0
    _live: dict[int, MergedBody] = field(default_factory=dict)

    def allocate(self) -> int:
        pid = self._next_id
        self._next_id += 1
        return pid

    @property
    def live(self) -> list[MergedBody]:
        return [self._live[k] for k in sorted(self._live)]

    def update(self, candidates: list[MergedBody], now_us: int) -> list[MergedBody]:
        """Associate this tick's candidates; returns them with person ids set."""
        for pid in [p for p, b in self._live.items()
                    if now_us - b.timestamp_us > self.lost_timeout_us]:
            del self._live[pid]
        previous = self.live
        assigned = track_persons(candidates, previous, 0, allocate=self.allocate,
                                 gate_base_m=self.gate_base_m,
                                 gate_speed_mps=self.gate_speed_mps)
        for body in assigned:
            self._live[body.person_id] = body
        return sorted(assigned, key=lambda b: b.person_id)

    def rename(self, old_pid: int, new_pid: int) -> None:
        """Re-bind a live track to a restored person id (face identity)."""
        if old_pid == new_pid or old_pid not in self._live:
            return
        body = self._live.pop(old_pid)
        body.person_id = new_pid
        self._live[new_pid] = body
        self._next_id = max(self._next_id, new_pid + 1)

    def clear_identity(self, pid: int) -> None:
        if pid in self._live:
            self._live[pid].identity_label = None
            self._live[pid].identity_confidence = None
