"""Point clouds from depth images, nearest-neighbour search, and rigid
registration (Kabsch and point-to-point ICP) for multi-sensor calibration.

ICP here is deliberately point-to-point: correspondence via exact nearest
neighbour, outlier rejection by a fixed distance threshold, and a weighted
Kabsch solve per iteration. Iteration order follows source point order so
replayed sessions registrate bit-identically.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import CameraIntrinsics, RigidTransform, quat_from_matrix


class PointCloudError(ValueError):
    pass


class DimensionMismatchError(PointCloudError):
    pass


class EmptyIndexError(PointCloudError):
    pass


class LengthMismatchError(PointCloudError):
    pass


class DegenerateConfigurationError(PointCloudError):
    pass


class TooFewPointsError(PointCloudError):
    pass


class NoInliersError(PointCloudError):
    pass


@dataclass(frozen=True, eq=False)
class DepthImage:
    """Row-major z-depth image in metres; 0 marks an invalid pixel."""

    width: int
    height: int
    depths: np.ndarray  # shape (height, width), float32

    def __post_init__(self):
        d = np.asarray(self.depths, dtype=np.float32).reshape(self.height, self.width)
        if not np.all(np.isfinite(d)) or np.any(d < 0):
            raise PointCloudError("depths must be finite and >= 0")
        object.__setattr__(self, "depths", d)


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray  # shape (N, 3), float64

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(p)):
            raise PointCloudError("cloud contains non-finite points")
        object.__setattr__(self, "points", p)

    def __len__(self) -> int:
        return len(self.points)

    def transformed(self, t: RigidTransform) -> "PointCloud":
        return PointCloud(t.apply(self.points)) if len(self) else self

    def to_bytes(self) -> bytes:
        """Count-prefixed little-endian float32 triplets."""
        pts = self.points.astype("<f4")
        return struct.pack("<I", len(pts)) + pts.tobytes()

    @staticmethod
    def from_bytes(blob: bytes) -> "PointCloud":
        if len(blob) < 4:
            raise PointCloudError("cloud blob too short")
        (count,) = struct.unpack_from("<I", blob)
        expected = 4 + 12 * count
        if len(blob) != expected:
            raise PointCloudError(f"cloud blob length {len(blob)} != {expected}")
        pts = np.frombuffer(blob, dtype="<f4", offset=4).reshape(count, 3)
        return PointCloud(pts.astype(np.float64))


def depth_to_cloud(img: DepthImage, intr: CameraIntrinsics, stride: int = 1) -> PointCloud:
    """Unproject every stride-th valid pixel (row-major order) into the sensor frame."""
    if stride < 1:
        raise PointCloudError(f"stride must be >= 1, got {stride}")
    if (intr.width, intr.height) != (img.width, img.height):
        raise DimensionMismatchError(
            f"intrinsics {intr.width}x{intr.height} != image {img.width}x{img.height}")
    flat = img.depths.reshape(-1)[::stride].astype(np.float64)
    idx = np.arange(0, img.width * img.height, stride)
    valid = flat > 0
    if not np.any(valid):
        return PointCloud(np.empty((0, 3)))
    z = flat[valid]
    u = (idx[valid] % img.width).astype(np.float64)
    v = (idx[valid] // img.width).astype(np.float64)
    x = (u - intr.cx) / intr.fx * z
    y = (v - intr.cy) / intr.fy * z
    return PointCloud(np.column_stack([x, y, z]))


class SpatialIndex:
    """Exact nearest-neighbour index over a point cloud (k-d tree)."""

    def __init__(self, cloud: PointCloud):
        if len(cloud) == 0:
            raise EmptyIndexError("cannot index an empty cloud")
        self._points = cloud.points
        self._tree = cKDTree(self._points)

    def __len__(self) -> int:
        return len(self._points)

    def nearest(self, q) -> tuple[np.ndarray, float]:
        d, i = self._tree.query(np.asarray(q, dtype=np.float64))
        return self._points[int(i)], float(d)

    def nearest_many(self, qs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized query: (matched points (N,3), distances (N,))."""
        d, i = self._tree.query(np.asarray(qs, dtype=np.float64))
        return self._points[i], d


def kabsch(source: np.ndarray, target: np.ndarray, weights=None) -> RigidTransform:
    """Weighted least-squares rigid alignment mapping source onto target.

    Minimizes sum_i w_i |R s_i + t - t_i|^2; the recovered rotation is a
    proper rotation (reflections corrected via the smallest singular vector).
    """
    source = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    target = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if len(source) != len(target):
        raise LengthMismatchError(f"{len(source)} source vs {len(target)} target points")
    if len(source) < 3:
        raise DegenerateConfigurationError("need at least 3 correspondences")
    if weights is None:
        weights = np.ones(len(source))
    else:
        weights = np.asarray(weights, dtype=np.float64)
        if len(weights) != len(source):
            raise LengthMismatchError("weights length mismatch")
        if np.any(weights < 0):
            raise PointCloudError("weights must be >= 0")
    wsum = float(weights.sum())
    if wsum <= 0:
        raise DegenerateConfigurationError("all weights are zero")
    w = weights / wsum
    mu_s = w @ source
    mu_t = w @ target
    h = (w[:, None] * (source - mu_s)).T @ (target - mu_t)
    u, s, vt = np.linalg.svd(h)
    if s[0] < 1e-15 or s[1] < 1e-9 * s[0]:
        raise DegenerateConfigurationError("correspondence covariance rank < 2")
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    t = mu_t - r @ mu_s
    return RigidTransform(quat_from_matrix(r), t)


@dataclass(frozen=True)
class IcpParams:
    reject_threshold: float = 0.1     # metres; correspondence gate
    epsilon: float = 1e-6             # metres; RMSE improvement / floor
    max_iterations: int = 50
    min_inlier_fraction: float = 0.3
    min_points: int = 10


@dataclass(frozen=True)
class IcpResult:
    transform: RigidTransform
    rmse: float
    iterations: int
    converged: bool
    inlier_fraction: float
    trace: tuple[float, ...] = field(default=())  # per-iteration RMSE


def icp(source: PointCloud, target: PointCloud, init: RigidTransform | None = None,
        params: IcpParams = IcpParams()) -> IcpResult:
    """Point-to-point ICP refining `init` so that transform(source) ~= target.

    Per iteration: exact nearest-neighbour correspondences, rejection beyond
    `reject_threshold`, Kabsch on the inliers, then RMSE over those pairs
    *after* the update (which Kabsch minimizes, keeping the trace monotone).
    Converged means the epsilon criterion fired with a sufficient inlier
    fraction.
    """
    if len(source) < params.min_points or len(target) < params.min_points:
        raise TooFewPointsError(
            f"need >= {params.min_points} points, got {len(source)} / {len(target)}")
    transform = init if init is not None else RigidTransform.identity()
    index = SpatialIndex(target)
    prev_rmse: float | None = None
    trace: list[float] = []
    converged = False
    inlier_fraction = 0.0
    iterations = 0
    for iterations in range(1, params.max_iterations + 1):
        moved = transform.apply(source.points)
        matched, dists = index.nearest_many(moved)
        inliers = dists <= params.reject_threshold
        n_in = int(inliers.sum())
        if n_in == 0:
            raise NoInliersError(
                f"all {len(dists)} correspondences beyond {params.reject_threshold} m")
        inlier_fraction = n_in / len(source)
        delta = kabsch(moved[inliers], matched[inliers])
        transform = delta.compose(transform)
        residual = delta.apply(moved[inliers]) - matched[inliers]
        rmse = float(np.sqrt(np.mean(np.sum(residual * residual, axis=1))))
        trace.append(rmse)
        if rmse < params.epsilon or (prev_rmse is not None
                                     and prev_rmse - rmse < params.epsilon):
            converged = inlier_fraction >= params.min_inlier_fraction
            break
        prev_rmse = rmse
    return IcpResult(transform=transform, rmse=trace[-1], iterations=iterations,
                     converged=converged, inlier_fraction=inlier_fraction,
                     trace=tuple(trace))
