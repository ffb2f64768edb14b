import numpy as np
import pytest

from fusetrack.geometry import RigidTransform, quat_from_axis_angle


@pytest.fixture
def rng():
    return np.random.default_rng(20240901)


def random_rigid_transform(rng, max_angle_rad=np.pi, max_translation=2.0) -> RigidTransform:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(-max_angle_rad, max_angle_rad)
    t = rng.uniform(-max_translation, max_translation, size=3)
    return RigidTransform(quat_from_axis_angle(axis, angle), t)


def transforms_close(a: RigidTransform, b: RigidTransform, tol=1e-9) -> bool:
    gap = a.compose(b.inverse())
    # small-angle: rotation angle ~= 2 * |vector part|
    return (np.linalg.norm(gap.translation) < tol
            and 2.0 * np.linalg.norm(gap.rotation[1:]) < tol)
