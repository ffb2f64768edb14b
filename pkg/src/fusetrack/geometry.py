"""Rigid transforms, pinhole camera model, rays, and screen-plane intersection.

Coordinate conventions used throughout the package:

* World frame is right-handed, y up. The scene's world origin sits at the
  bottom-left corner of the first screen.
* Camera (sensor) frames are right-handed with x right, y down and the
  camera looking down +z; depth is the z coordinate of the pinhole model.
* Screen planes carry their own 2-D frame (u_axis right, v_axis up, origin
  at the bottom-left corner). Emitted *pixel* coordinates flip v so the
  pixel origin is the top-left corner, matching display convention.

Rotations are kept as unit quaternions (w, x, y, z) rather than matrices so
repeated composition does not drift; matrix conversion exists for file
formats that want a 4x4.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

UNIT_TOL = 1e-9


class GeometryError(ValueError):
    """Base class for geometry input violations."""


class NonPositiveDepthError(GeometryError):
    pass


class OutOfImageBoundsError(GeometryError):
    pass


class BehindCameraError(GeometryError):
    pass


def vec3(x: float, y: float, z: float) -> np.ndarray:
    """Build a finite 3-vector (float64)."""
    v = np.array([x, y, z], dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise GeometryError(f"non-finite vector components: {v}")
    return v


def _as_vec3(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (3,):
        raise GeometryError(f"expected shape (3,), got {v.shape}")
    if not np.all(np.isfinite(v)):
        raise GeometryError(f"non-finite vector components: {v}")
    return v


def normalize(v) -> np.ndarray:
    v = _as_vec3(v)
    n = float(np.linalg.norm(v))
    if n < UNIT_TOL:
        raise GeometryError("cannot normalize near-zero vector")
    return v / n


# ---------------------------------------------------------------------------
# quaternions (w, x, y, z)
# ---------------------------------------------------------------------------

def quat_identity() -> np.ndarray:
    return np.array([1.0, 0.0, 0.0, 0.0])


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = float(np.linalg.norm(q))
    if n < UNIT_TOL:
        raise GeometryError("cannot normalize near-zero quaternion")
    q = q / n
    # canonical sign: first nonzero component positive, so serialized
    # transforms are byte-stable across equivalent q / -q inputs
    for c in q:
        if abs(c) > 1e-12:
            if c < 0:
                q = -q
            break
    return q


def quat_multiply(a, b) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conjugate(q) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_rotate(q, v: np.ndarray) -> np.ndarray:
    """Rotate vector(s) v (shape (3,) or (N,3)) by unit quaternion q."""
    w, x, y, z = q
    u = np.array([x, y, z])
    v = np.asarray(v, dtype=np.float64)
    uv = np.cross(u, v)
    return v + 2.0 * (w * uv + np.cross(u, uv))


def quat_from_axis_angle(axis, angle_rad: float) -> np.ndarray:
    axis = normalize(axis)
    half = 0.5 * angle_rad
    return quat_normalize(np.concatenate(([math.cos(half)], math.sin(half) * axis)))


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def quat_from_matrix(m) -> np.ndarray:
    """Shepperd's method; m must be a proper rotation (det +1)."""
    m = np.asarray(m, dtype=np.float64)
    t = np.trace(m)
    if t > 0:
        s = math.sqrt(t + 1.0) * 2.0
        q = np.array([0.25 * s,
                      (m[2, 1] - m[1, 2]) / s,
                      (m[0, 2] - m[2, 0]) / s,
                      (m[1, 0] - m[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(m)))
        if i == 0:
            s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
            q = np.array([(m[2, 1] - m[1, 2]) / s, 0.25 * s,
                          (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s])
        elif i == 1:
            s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
            q = np.array([(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s,
                          0.25 * s, (m[1, 2] + m[2, 1]) / s])
        else:
            s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
            q = np.array([(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s,
                          (m[1, 2] + m[2, 1]) / s, 0.25 * s])
    return quat_normalize(q)


def quat_angle_deg(q) -> float:
    """Rotation angle of a unit quaternion, in degrees (0..180)."""
    w = min(1.0, abs(float(q[0])))
    return math.degrees(2.0 * math.acos(w))


# ---------------------------------------------------------------------------
# rigid transforms
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Rotation (unit quaternion) + translation, mapping one frame into another."""

    rotation: np.ndarray = field(default_factory=quat_identity)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64)
        t = _as_vec3(self.translation)
        if q.shape != (4,) or not np.all(np.isfinite(q)):
            raise GeometryError("rotation must be a finite quaternion (w,x,y,z)")
        if abs(float(np.linalg.norm(q)) - 1.0) > 1e-6:
            raise GeometryError("quaternion is not unit length")
        object.__setattr__(self, "rotation", quat_normalize(q))
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform()

    @staticmethod
    def from_axis_angle(axis, angle_rad: float, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return RigidTransform(quat_from_axis_angle(axis, angle_rad), _as_vec3(translation))

    @staticmethod
    def from_matrix(m) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        return RigidTransform(quat_from_matrix(m[:3, :3]), m[:3, 3].copy())

    def to_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = quat_to_matrix(self.rotation)
        m[:3, 3] = self.translation
        return m

    def apply(self, p) -> np.ndarray:
        """Transform point(s): rotation @ p + translation. p is (3,) or (N,3)."""
        return quat_rotate(self.rotation, p) + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self o other: (self o other)(p) == self(other(p))."""
        return RigidTransform(
            quat_multiply(self.rotation, other.rotation),
            quat_rotate(self.rotation, other.translation) + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        qc = quat_conjugate(self.rotation)
        return RigidTransform(quat_normalize(qc), -quat_rotate(qc, self.translation))

    def rotation_angle_deg(self) -> float:
        return quat_angle_deg(self.rotation)


def transform_point(t: RigidTransform, p) -> np.ndarray:
    return t.apply(p)


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    return a.compose(b)


def transform_error(a: RigidTransform, b: RigidTransform) -> tuple[float, float]:
    """(translation distance in metres, rotation gap in degrees) between two transforms."""
    d = a.compose(b.inverse())
    return float(np.linalg.norm(a.translation - b.translation)), d.rotation_angle_deg()


# ---------------------------------------------------------------------------
# pinhole camera
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError("principal point outside image")


def unproject(intr: CameraIntrinsics, u: float, v: float, depth: float) -> np.ndarray:
    """Pixel (u, v) at z-depth (metres) -> point in the camera frame."""
    if depth <= 0:
        raise NonPositiveDepthError(f"depth must be > 0, got {depth}")
    if not (0 <= u < intr.width and 0 <= v < intr.height):
        raise OutOfImageBoundsError(f"pixel ({u}, {v}) outside {intr.width}x{intr.height}")
    return np.array([(u - intr.cx) / intr.fx * depth,
                     (v - intr.cy) / intr.fy * depth,
                     depth])


def project(intr: CameraIntrinsics, p) -> tuple[float, float]:
    """Camera-frame point -> pixel coordinates; may land outside image bounds."""
    p = _as_vec3(p)
    if p[2] <= 0:
        raise BehindCameraError(f"point has non-positive depth z={p[2]}")
    return (intr.fx * p[0] / p[2] + intr.cx,
            intr.fy * p[1] / p[2] + intr.cy)


# ---------------------------------------------------------------------------
# rays and screens
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Ray:
    origin: np.ndarray
    direction: np.ndarray  # unit

    def __post_init__(self):
        object.__setattr__(self, "origin", _as_vec3(self.origin))
        object.__setattr__(self, "direction", normalize(self.direction))

    @staticmethod
    def through(origin, target) -> "Ray":
        origin = _as_vec3(origin)
        return Ray(origin, _as_vec3(target) - origin)


@dataclass(frozen=True, eq=False)
class ScreenRect:
    """Physical screen rectangle in the world frame.

    origin is the bottom-left corner; u_axis spans width (right), v_axis
    spans height (up). Both are unit and mutually orthogonal.
    """

    screen_id: str
    origin: np.ndarray
    u_axis: np.ndarray
    v_axis: np.ndarray
    width: float
    height: float
    pixel_width: int
    pixel_height: int

    def __post_init__(self):
        object.__setattr__(self, "origin", _as_vec3(self.origin))
        object.__setattr__(self, "u_axis", _as_vec3(self.u_axis))
        object.__setattr__(self, "v_axis", _as_vec3(self.v_axis))
        for name in ("u_axis", "v_axis"):
            if abs(float(np.linalg.norm(getattr(self, name))) - 1.0) > UNIT_TOL:
                raise GeometryError(f"{name} must be unit length")
        if abs(float(np.dot(self.u_axis, self.v_axis))) > UNIT_TOL:
            raise GeometryError("u_axis and v_axis must be orthogonal")
        if self.width <= 0 or self.height <= 0:
            raise GeometryError("screen extent must be positive")

    @property
    def normal(self) -> np.ndarray:
        return np.cross(self.u_axis, self.v_axis)

    def point_at(self, u: float, v: float) -> np.ndarray:
        """Point on the screen at normalized plane coordinates (u right, v up)."""
        return self.origin + u * self.width * self.u_axis + v * self.height * self.v_axis


@dataclass(frozen=True)
class ScreenHit:
    """Ray-screen intersection in screen-space coordinates.

    u, v are normalized in [0, 1] with v measured upward from the bottom-left
    corner; pixel_u, pixel_v use the top-left pixel origin (v flipped).
    """

    screen_id: str
    u: float
    v: float
    pixel_u: float
    pixel_v: float
    point: np.ndarray
    distance: float


def intersect_screen(ray: Ray, screen: ScreenRect) -> ScreenHit | None:
    """Ray-plane intersection clipped to the screen rectangle; None on miss."""
    n = screen.normal
    denom = float(np.dot(ray.direction, n))
    if abs(denom) < 1e-9:
        return None
    t = float(np.dot(screen.origin - ray.origin, n)) / denom
    if t <= 0:
        return None
    hit = ray.origin + t * ray.direction
    rel = hit - screen.origin
    a = float(np.dot(rel, screen.u_axis))
    b = float(np.dot(rel, screen.v_axis))
    if not (0.0 <= a <= screen.width and 0.0 <= b <= screen.height):
        return None
    u = a / screen.width
    v = b / screen.height
    return ScreenHit(
        screen_id=screen.screen_id,
        u=u,
        v=v,
        pixel_u=u * screen.pixel_width,
        pixel_v=(1.0 - v) * screen.pixel_height,
        point=hit,
        distance=t,
    )


def camera_look_at(position, target, up=(0.0, 1.0, 0.0)) -> RigidTransform:
    """world_from_camera pose for a camera at `position` looking at `target`.

    Camera axes: x right, y down, z forward (computer-vision convention).
    """
    position = _as_vec3(position)
    fwd = normalize(_as_vec3(target) - position)
    x = normalize(np.cross(fwd, _as_vec3(up)))
    y = np.cross(fwd, x)
    m = np.column_stack([x, y, fwd])
    return RigidTransform(quat_from_matrix(m), position)
