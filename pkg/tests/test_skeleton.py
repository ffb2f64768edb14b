import numpy as np
import pytest

from conftest import random_rigid_transform
from oracles import brute_force_pair_assignment

from fusetrack.skeleton import (
    JOINT_COUNT,
    Confidence,
    GapTooLargeError,
    JointId,
    MergedBody,
    MismatchedBodyError,
    PersonTracker,
    Skeleton,
    TimestampOutOfRangeError,
    interpolate,
    match_skeletons,
    merge,
    skeleton_distance,
    track_persons,
)

WORLD = "world"


def make_skeleton(sensor="cam0", body=0, ts=0, offset=(0.0, 0.0, 0.0),
                  confidences=None, rng=None, frame=WORLD):
    base = np.linspace(0, 1, JOINT_COUNT * 3).reshape(JOINT_COUNT, 3)
    if rng is not None:
        base = base + rng.normal(0, 0.02, size=base.shape)
    conf = np.full(JOINT_COUNT, Confidence.HIGH) if confidences is None else confidences
    return Skeleton(sensor_id=sensor, body_id=body, timestamp_us=ts,
                    positions=base + np.asarray(offset), confidences=conf, frame=frame)


class TestInterpolate:
    def test_endpoint_returns_input_verbatim(self):
        a = make_skeleton(ts=1000)
        b = make_skeleton(ts=2000, offset=(1, 0, 0),
                          confidences=np.full(JOINT_COUNT, Confidence.LOW))
        assert interpolate(a, b, 1000) is a
        assert interpolate(a, b, 2000) is b

    def test_midpoint_positions(self):
        a = make_skeleton(ts=0)
        b = make_skeleton(ts=100_000, offset=(2, 0, 0))
        mid = interpolate(a, b, 50_000)
        assert np.allclose(mid.positions, a.positions + [1, 0, 0])

    def test_confidence_is_minimum(self):
        ca = np.full(JOINT_COUNT, Confidence.HIGH)
        ca[3] = Confidence.NONE
        cb = np.full(JOINT_COUNT, Confidence.MEDIUM)
        mid = interpolate(make_skeleton(ts=0, confidences=ca),
                          make_skeleton(ts=100_000, confidences=cb), 50_000)
        assert mid.confidences[3] == Confidence.NONE
        assert mid.confidences[0] == Confidence.MEDIUM

    def test_gap_too_large(self):
        with pytest.raises(GapTooLargeError):
            interpolate(make_skeleton(ts=0), make_skeleton(ts=300_001), 150_000)

    def test_mismatched_body(self):
        with pytest.raises(MismatchedBodyError):
            interpolate(make_skeleton(body=0, ts=0), make_skeleton(body=1, ts=100_000), 50_000)

    def test_out_of_range(self):
        with pytest.raises(TimestampOutOfRangeError):
            interpolate(make_skeleton(ts=1000), make_skeleton(ts=2000), 500)

    def test_idempotent_at_fixed_time(self):
        a = make_skeleton(ts=0)
        b = make_skeleton(ts=100_000, offset=(0.4, 0.1, 0))
        once = interpolate(a, b, 40_000)
        assert np.allclose(interpolate(a, b, 40_000).positions, once.positions)


class TestMatching:
    def test_duplicated_skeleton_matches(self):
        a = make_skeleton(sensor="cam0")
        b = make_skeleton(sensor="cam1")
        sets = match_skeletons([[a], [b]], threshold=0.3)
        assert len(sets) == 1 and len(sets[0]) == 2

    def test_two_persons_two_sensors(self, rng):
        p1 = (0.0, 0.0, 0.0)
        p2 = (2.0, 0.0, 0.0)
        groups = [
            [make_skeleton("cam0", 0, offset=p1, rng=rng), make_skeleton("cam0", 1, offset=p2, rng=rng)],
            [make_skeleton("cam1", 0, offset=p2, rng=rng), make_skeleton("cam1", 1, offset=p1, rng=rng)],
        ]
        sets = match_skeletons(groups, threshold=0.3)
        assert len(sets) == 2
        for s in sets:
            assert len(s) == 2
            # same physical person: pelvis within noise
            assert np.linalg.norm(s[0].positions[0] - s[1].positions[0]) < 0.3

    def test_singleton_preserved(self):
        only = make_skeleton("cam0", offset=(5, 0, 0))
        pair_a = make_skeleton("cam0", body=1)
        pair_b = make_skeleton("cam1", body=0)
        sets = match_skeletons([[only, pair_a], [pair_b]], threshold=0.3)
        assert sorted(len(s) for s in sets) == [1, 2]

    def test_partition_property(self, rng):
        for _ in range(20):
            groups = []
            for gi in range(3):
                groups.append([
                    make_skeleton(f"cam{gi}", body=i, offset=rng.uniform(-3, 3, 3), rng=rng)
                    for i in range(int(rng.integers(0, 4)))
                ])
            sets = match_skeletons(groups, threshold=0.5)
            flat = [id(s) for group in groups for s in group]
            out = [id(s) for st in sets for s in st]
            assert sorted(flat) == sorted(out)

    def test_empty_input(self):
        assert match_skeletons([], threshold=0.3) == []
        assert match_skeletons([[], []], threshold=0.3) == []

    def test_fewer_than_three_common_joints_never_match(self):
        conf_a = np.full(JOINT_COUNT, Confidence.NONE)
        conf_a[:2] = Confidence.HIGH
        a = make_skeleton("cam0", confidences=conf_a)
        b = make_skeleton("cam1")
        assert skeleton_distance(a, b) is None
        sets = match_skeletons([[a], [b]], threshold=10.0)
        assert len(sets) == 2

    def test_pairwise_assignment_matches_bruteforce_oracle(self, rng):
        for _ in range(60):
            na, nb = int(rng.integers(1, 5)), int(rng.integers(1, 5))
            ga = [make_skeleton("cam0", body=i, offset=rng.uniform(-2, 2, 3), rng=rng)
                  for i in range(na)]
            gb = [make_skeleton("cam1", body=i, offset=rng.uniform(-2, 2, 3), rng=rng)
                  for i in range(nb)]
            threshold = float(rng.uniform(0.2, 2.0))
            cost = np.full((na, nb), np.inf)
            for i in range(na):
                for j in range(nb):
                    d = skeleton_distance(ga[i], gb[j])
                    cost[i, j] = np.inf if d is None else d
            expected_pairs, _ = brute_force_pair_assignment(cost, threshold)
            sets = match_skeletons([ga, gb], threshold)
            got_pairs = set()
            for st in sets:
                a_items = [s for s in st if s.sensor_id == "cam0"]
                b_items = [s for s in st if s.sensor_id == "cam1"]
                if a_items and b_items:
                    got_pairs.add((ga.index(a_items[0]), gb.index(b_items[0])))
            assert got_pairs == set(expected_pairs)

    def test_invariant_under_common_rigid_motion(self, rng):
        groups = [
            [make_skeleton("cam0", body=i, offset=rng.uniform(-2, 2, 3), rng=rng) for i in range(3)],
            [make_skeleton("cam1", body=i, offset=rng.uniform(-2, 2, 3), rng=rng) for i in range(3)],
        ]
        r = random_rigid_transform(rng)
        moved = [[Skeleton(s.sensor_id, s.body_id, s.timestamp_us, r.apply(s.positions),
                           s.confidences, s.frame) for s in g] for g in groups]
        sets_a = match_skeletons(groups, 0.5)
        sets_b = match_skeletons(moved, 0.5)
        sig_a = sorted(tuple(sorted((s.sensor_id, s.body_id) for s in st)) for st in sets_a)
        sig_b = sorted(tuple(sorted((s.sensor_id, s.body_id) for s in st)) for st in sets_b)
        assert sig_a == sig_b


class TestMerge:
    def test_single_contributor_verbatim(self):
        s = make_skeleton()
        body = merge([s])
        assert np.array_equal(body.positions, s.positions)
        assert np.array_equal(body.confidences, s.confidences)
        assert body.contributors == (("cam0", 0),)
        assert body.person_id is None

    def test_equal_confidence_average(self):
        a = make_skeleton("cam0")
        b = make_skeleton("cam1", offset=(1, 0, 0))
        body = merge([a, b])
        assert np.allclose(body.positions, a.positions + [0.5, 0, 0])

    def test_zero_weight_side_ignored(self):
        conf_none = np.full(JOINT_COUNT, Confidence.NONE)
        conf_none[0] = Confidence.HIGH  # keep one joint so matching data exists
        a = make_skeleton("cam0")
        b = make_skeleton("cam1", offset=(1, 0, 0), confidences=conf_none)
        body = merge([a, b])
        assert np.allclose(body.positions[1:], a.positions[1:])
        assert body.confidences[1] == Confidence.HIGH  # max over contributors

    def test_all_zero_weight_joint_gets_none(self):
        conf = np.full(JOINT_COUNT, Confidence.NONE)
        conf[:5] = Confidence.HIGH
        a = make_skeleton("cam0", confidences=conf)
        b = make_skeleton("cam1", confidences=conf)
        body = merge([a, b])
        assert body.confidences[10] == Confidence.NONE

    def test_merge_of_identical_skeletons_is_identity(self, rng):
        for conf_level in (Confidence.LOW, Confidence.MEDIUM, Confidence.HIGH):
            s = make_skeleton(confidences=np.full(JOINT_COUNT, conf_level), rng=rng)
            copies = [s, make_skeleton("cam1", confidences=np.full(JOINT_COUNT, conf_level))]
            copies[1] = Skeleton("cam1", 0, s.timestamp_us, s.positions, s.confidences, s.frame)
            body = merge(copies)
            assert np.allclose(body.positions, s.positions)

    def test_person_id_inherited_from_prev(self):
        s = make_skeleton()
        prev = merge([s])
        prev.person_id = 7
        prev.identity_label = "alice"
        prev.identity_confidence = 0.9
        body = merge([s], prev=prev)
        assert body.person_id == 7
        assert body.identity_label == "alice"


class TestTracking:
    def test_static_person_keeps_id(self):
        t = PersonTracker()
        first = t.update([merge([make_skeleton(ts=0)])], now_us=0)
        second = t.update([merge([make_skeleton(ts=33_000)])], now_us=33_000)
        assert first[0].person_id == second[0].person_id

    def test_empty_previous_allocates_fresh(self):
        t = PersonTracker()
        bodies = t.update([merge([make_skeleton(body=0)]),
                           merge([make_skeleton(body=1, offset=(2, 0, 0))])], now_us=0)
        assert sorted(b.person_id for b in bodies) == [0, 1]

    def test_no_double_assignment(self, rng):
        prev_a = merge([make_skeleton(ts=0)])
        prev_a.person_id = 0
        cand1 = merge([make_skeleton(ts=33_000, offset=(0.05, 0, 0))])
        cand2 = merge([make_skeleton(ts=33_000, offset=(0.06, 0, 0))])
        out = track_persons([cand1, cand2], [prev_a], dt_us=33_000, allocate=iter(range(10, 20)).__next__)
        pids = [b.person_id for b in out]
        assert len(set(pids)) == 2 and 0 in pids

    def test_retirement_after_timeout(self):
        t = PersonTracker(lost_timeout_us=2_000_000)
        t.update([merge([make_skeleton(ts=0)])], now_us=0)
        t.update([], now_us=2_500_000)
        bodies = t.update([merge([make_skeleton(ts=2_600_000)])], now_us=2_600_000)
        assert bodies[0].person_id == 1  # fresh id, old track retired

    def test_coasting_within_timeout_reassociates(self):
        t = PersonTracker(lost_timeout_us=2_000_000)
        t.update([merge([make_skeleton(ts=0)])], now_us=0)
        t.update([], now_us=500_000)
        bodies = t.update([merge([make_skeleton(ts=900_000, offset=(0.8, 0, 0))])],
                          now_us=900_000)
        # 0.9 s gap widens the gate to 1.4 m, so 0.8 m motion still associates
        assert bodies[0].person_id == 0

    def test_rename_restores_person_id(self):
        t = PersonTracker()
        t.update([merge([make_skeleton(ts=0)])], now_us=0)
        t.rename(0, 41)
        bodies = t.update([merge([make_skeleton(ts=33_000)])], now_us=33_000)
        assert bodies[0].person_id == 41
