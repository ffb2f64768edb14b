import math

import numpy as np
import pytest

from conftest import random_rigid_transform, transforms_close
from oracles import homogeneous_apply, homogeneous_compose, solve_ray_plane

from fusetrack.geometry import (
    BehindCameraError,
    CameraIntrinsics,
    GeometryError,
    NonPositiveDepthError,
    OutOfImageBoundsError,
    Ray,
    RigidTransform,
    ScreenRect,
    camera_look_at,
    compose,
    intersect_screen,
    project,
    quat_from_axis_angle,
    transform_point,
    unproject,
    vec3,
)

INTR = CameraIntrinsics(fx=500.0, fy=500.0, cx=320.0, cy=240.0, width=640, height=480)


def make_screen(**kw):
    defaults = dict(
        screen_id="s0",
        origin=vec3(-1.0, -0.5, 0.0),
        u_axis=vec3(1, 0, 0),
        v_axis=vec3(0, 1, 0),
        width=2.0,
        height=1.0,
        pixel_width=1920,
        pixel_height=1080,
    )
    defaults.update(kw)
    return ScreenRect(**defaults)


class TestTransform:
    def test_identity_apply(self):
        assert np.allclose(transform_point(RigidTransform.identity(), vec3(1, 2, 3)), [1, 2, 3])

    def test_translation_apply(self):
        t = RigidTransform(translation=vec3(1, 0, 0))
        assert np.allclose(t.apply(vec3(0, 0, 0)), [1, 0, 0])

    def test_rotation_90deg_about_z(self):
        t = RigidTransform.from_axis_angle(vec3(0, 0, 1), math.pi / 2)
        assert np.allclose(t.apply(vec3(1, 0, 0)), [0, 1, 0], atol=1e-12)

    def test_compose_identity(self, rng):
        a = random_rigid_transform(rng)
        assert transforms_close(compose(a, RigidTransform.identity()), a)

    def test_compose_inverse_is_identity(self, rng):
        for _ in range(50):
            a = random_rigid_transform(rng)
            assert transforms_close(compose(a, a.inverse()), RigidTransform.identity())

    def test_compose_matches_matrix_oracle(self, rng):
        for _ in range(200):
            a = random_rigid_transform(rng)
            b = random_rigid_transform(rng)
            p = rng.uniform(-3, 3, size=3)
            expected = homogeneous_apply(homogeneous_compose(a.to_matrix(), b.to_matrix()), p)
            assert np.allclose(compose(a, b).apply(p), expected, atol=1e-9)

    def test_compose_application_order(self, rng):
        a = random_rigid_transform(rng)
        b = random_rigid_transform(rng)
        p = rng.uniform(-3, 3, size=3)
        assert np.allclose(compose(a, b).apply(p), a.apply(b.apply(p)), atol=1e-9)

    def test_associativity(self, rng):
        a, b, c = (random_rigid_transform(rng) for _ in range(3))
        p = rng.uniform(-2, 2, size=3)
        lhs = compose(compose(a, b), c).apply(p)
        rhs = compose(a, compose(b, c)).apply(p)
        assert np.allclose(lhs, rhs, atol=1e-9)

    def test_matrix_round_trip(self, rng):
        for _ in range(100):
            a = random_rigid_transform(rng)
            assert transforms_close(RigidTransform.from_matrix(a.to_matrix()), a, tol=1e-9)

    def test_non_unit_quaternion_rejected(self):
        with pytest.raises(GeometryError):
            RigidTransform(rotation=np.array([1.0, 1.0, 0.0, 0.0]))

    def test_batch_apply(self, rng):
        a = random_rigid_transform(rng)
        pts = rng.uniform(-2, 2, size=(32, 3))
        batched = a.apply(pts)
        for i in range(len(pts)):
            assert np.allclose(batched[i], a.apply(pts[i]))


class TestPinhole:
    def test_unproject_principal_point(self):
        assert np.allclose(unproject(INTR, 320, 240, 2.0), [0, 0, 2.0])

    def test_unproject_off_axis(self):
        wide = CameraIntrinsics(fx=500, fy=500, cx=320, cy=240, width=1000, height=480)
        assert np.allclose(unproject(wide, 820, 240, 1.0), [1.0, 0.0, 1.0])

    def test_project_center(self):
        assert np.allclose(project(INTR, vec3(0, 0, 1)), (320, 240))

    def test_project_unit_offset(self):
        u, v = project(INTR, vec3(1, 0, 1))
        assert (u, v) == pytest.approx((820, 240))

    def test_round_trip_pixels(self, rng):
        for _ in range(200):
            u = rng.uniform(0, INTR.width - 1e-6)
            v = rng.uniform(0, INTR.height - 1e-6)
            d = rng.uniform(0.2, 8.0)
            uu, vv = project(INTR, unproject(INTR, u, v, d))
            assert abs(uu - u) < 1e-6 and abs(vv - v) < 1e-6

    def test_round_trip_points(self, rng):
        for _ in range(200):
            p = np.array([rng.uniform(-1, 1), rng.uniform(-0.7, 0.7), rng.uniform(0.5, 6)])
            u, v = project(INTR, p)
            if 0 <= u < INTR.width and 0 <= v < INTR.height:
                assert np.allclose(unproject(INTR, u, v, p[2]), p, atol=1e-9)

    def test_unproject_rejects_bad_depth(self):
        with pytest.raises(NonPositiveDepthError):
            unproject(INTR, 320, 240, 0.0)

    def test_unproject_rejects_out_of_bounds(self):
        with pytest.raises(OutOfImageBoundsError):
            unproject(INTR, 1000, 240, 1.0)

    def test_project_rejects_behind_camera(self):
        with pytest.raises(BehindCameraError):
            project(INTR, vec3(0, 0, -1))

    def test_intrinsics_validation(self):
        with pytest.raises(GeometryError):
            CameraIntrinsics(fx=-1, fy=500, cx=320, cy=240, width=640, height=480)
        with pytest.raises(GeometryError):
            CameraIntrinsics(fx=500, fy=500, cx=700, cy=240, width=640, height=480)


class TestScreenIntersection:
    def test_symmetric_center_hit(self):
        screen = make_screen()
        hit = intersect_screen(Ray(vec3(0, 0, -1), vec3(0, 0, 1)), screen)
        assert hit is not None
        assert hit.screen_id == "s0"
        assert (hit.u, hit.v) == pytest.approx((0.5, 0.5))
        assert (hit.pixel_u, hit.pixel_v) == pytest.approx((960, 540))

    def test_parallel_ray_misses(self):
        screen = make_screen()
        assert intersect_screen(Ray(vec3(0, 0, -1), vec3(1, 0, 0)), screen) is None

    def test_backward_hit_misses(self):
        screen = make_screen()
        assert intersect_screen(Ray(vec3(0, 0, -1), vec3(0, 0, -1)), screen) is None

    def test_outside_rectangle_misses(self):
        screen = make_screen()
        assert intersect_screen(Ray(vec3(5, 0, -1), vec3(0, 0, 1)), screen) is None

    def test_pixel_v_flips_downward(self):
        # plane v near the top edge -> small pixel_v (top-left pixel origin)
        screen = make_screen()
        hit = intersect_screen(Ray(vec3(0, 0.45, -1), vec3(0, 0, 1)), screen)
        assert hit is not None and hit.v > 0.9 and hit.pixel_v < 0.1 * screen.pixel_height

    def test_oblique_rays_match_linear_solver_oracle(self, rng):
        for _ in range(100):
            screen = make_screen()
            origin = rng.uniform(-2, 2, size=3)
            origin[2] = -rng.uniform(0.5, 3.0)
            target = screen.point_at(rng.uniform(-0.3, 1.3), rng.uniform(-0.3, 1.3))
            direction = target - origin
            expected = solve_ray_plane(origin, direction / np.linalg.norm(direction),
                                       screen.origin, screen.u_axis, screen.v_axis,
                                       screen.width, screen.height)
            hit = intersect_screen(Ray(origin, direction), screen)
            if expected is None:
                assert hit is None
            else:
                t, a, b = expected
                assert hit is not None
                assert hit.distance == pytest.approx(t, abs=1e-9)
                assert hit.u == pytest.approx(a / screen.width, abs=1e-9)
                assert hit.v == pytest.approx(b / screen.height, abs=1e-9)

    def test_hit_point_lies_on_plane(self, rng):
        screen = make_screen()
        for _ in range(50):
            origin = np.array([rng.uniform(-1, 1), rng.uniform(-0.5, 0.5), -rng.uniform(0.5, 2)])
            hit = intersect_screen(Ray.through(origin, screen.point_at(rng.uniform(0, 1), rng.uniform(0, 1))), screen)
            assert hit is not None
            assert abs(float(np.dot(hit.point - screen.origin, screen.normal))) < 1e-9

    def test_uv_invariant_under_direction_scaling(self):
        screen = make_screen()
        origin = vec3(0.3, 0.1, -2.0)
        direction = vec3(-0.1, 0.05, 1.0)
        h1 = intersect_screen(Ray(origin, direction), screen)
        h2 = intersect_screen(Ray(origin, direction * 37.5), screen)
        assert h1 is not None and h2 is not None
        assert (h1.u, h1.v) == pytest.approx((h2.u, h2.v), abs=1e-12)

    def test_screen_validation(self):
        with pytest.raises(GeometryError):
            make_screen(u_axis=vec3(1, 0.5, 0) / np.linalg.norm([1, 0.5, 0]))  # not orthogonal
        with pytest.raises(GeometryError):
            make_screen(width=-1.0)


def test_camera_look_at_points_z_forward():
    pose = camera_look_at(vec3(0, 1, 3), vec3(0, 1, 0))
    fwd_world = pose.apply(vec3(0, 0, 1)) - pose.translation
    assert np.allclose(fwd_world, [0, 0, -1], atol=1e-12)
    # y axis of the camera maps to world "down"
    down_world = pose.apply(vec3(0, 1, 0)) - pose.translation
    assert np.allclose(down_world, [0, -1, 0], atol=1e-12)


def test_vec3_rejects_non_finite():
    with pytest.raises(GeometryError):
        vec3(float("nan"), 0, 0)
