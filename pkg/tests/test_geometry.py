import numpy as np
import pytest

from cmc_forge.errors import ConfigError, DomainError
from cmc_forge.geometry import (
    CameraIntrinsics,
    CameraPose,
    PixelCoord,
    camera_center,
    project,
    project_points,
    unproject,
    unproject_pixels,
    visible_in_view,
)


def random_rotation(rng):
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_pose(rng):
    return CameraPose(rotation=random_rotation(rng), translation=rng.normal(size=3))


K = CameraIntrinsics(fx=32.0, fy=32.0, cx=16.0, cy=16.0, width=32, height=32)
IDENTITY = CameraPose(rotation=np.eye(3), translation=np.zeros(3))


def test_project_optical_axis():
    res = project(np.array([0.0, 0.0, 2.0]), IDENTITY, K)
    assert res is not None
    pixel, depth = res
    assert (pixel.u, pixel.v, depth) == (16.0, 16.0, 2.0)


def test_project_behind_camera_is_empty():
    assert project(np.array([0.0, 0.0, -1.0]), IDENTITY, K) is None


def test_unproject_principal_point():
    point = unproject(PixelCoord(16.0, 16.0, 0), 3.5, IDENTITY, K)
    np.testing.assert_allclose(point, [0.0, 0.0, 3.5])


def test_unproject_rejects_nonpositive_depth():
    with pytest.raises(DomainError):
        unproject(PixelCoord(10.0, 10.0, 0), 0.0, IDENTITY, K)


def test_round_trip_10k_random_samples():
    rng = np.random.default_rng(42)
    pose = random_pose(rng)
    u = rng.uniform(0, K.width - 1e-9, size=10_000)
    v = rng.uniform(0, K.height - 1e-9, size=10_000)
    depth = rng.uniform(0.1, 50.0, size=10_000)
    world = unproject_pixels(u, v, depth, pose, K)
    u2, v2, d2, inside = project_points(world, pose, K)
    assert inside.all()
    scale = np.maximum.reduce([np.abs(u), np.abs(v), np.abs(depth), np.ones_like(u)])
    err = np.maximum.reduce([np.abs(u2 - u), np.abs(v2 - v), np.abs(d2 - depth)]) / scale
    assert err.max() < 1e-9


def test_pose_composition_matches_identity_on_camera_space():
    rng = np.random.default_rng(7)
    pose = random_pose(rng)
    points = rng.normal(size=(200, 3)) * 3.0
    cam_space = points @ pose.rotation.T + pose.translation
    u1, v1, d1, in1 = project_points(points, pose, K)
    u2, v2, d2, in2 = project_points(cam_space, IDENTITY, K)
    np.testing.assert_array_equal(in1, in2)
    np.testing.assert_allclose(u1[in1], u2[in2], rtol=1e-12, atol=1e-9)
    np.testing.assert_allclose(d1[in1], d2[in2], rtol=1e-12, atol=1e-9)


def test_pose_validation_rejects_non_orthonormal():
    with pytest.raises(ConfigError):
        CameraPose(rotation=np.eye(3) * 1.5, translation=np.zeros(3))


def test_intrinsics_validation():
    with pytest.raises(ConfigError):
        CameraIntrinsics(fx=-1.0, fy=1.0, cx=0.0, cy=0.0, width=8, height=8)
    with pytest.raises(ConfigError):
        CameraIntrinsics(fx=1.0, fy=1.0, cx=9.0, cy=0.0, width=8, height=8)


def test_camera_center_inverts_translation():
    rng = np.random.default_rng(3)
    pose = random_pose(rng)
    center = camera_center(pose)
    np.testing.assert_allclose(pose.rotation @ center + pose.translation, 0.0, atol=1e-12)


class _StubView:
    """Minimal view stand-in: pose, intrinsics, rendered depth."""

    def __init__(self, gt_depth):
        self.pose = IDENTITY
        self.intrinsics = K
        self.gt_depth = gt_depth


class _StubCloud:
    def __init__(self, positions):
        self.positions = np.asarray(positions, dtype=np.float64)


def _two_plane_view():
    # Analytic scene: near plane z=2 covers the left half of the image,
    # far plane z=5 the right half.
    depth = np.full((K.height, K.width), 5.0)
    depth[:, : K.width // 2] = 2.0
    return _StubView(depth)


def _two_plane_oracle(point, tol):
    # Independent ray-cast: the pixel column decides which plane the ray
    # hits first; the point is visible iff it is not behind that surface.
    x, y, z = point
    if z <= 0:
        return False
    u = K.fx * x / z + K.cx
    v = K.fy * y / z + K.cy
    if not (0 <= u < K.width and 0 <= v < K.height):
        return False
    rendered = 2.0 if int(round(min(u, K.width - 1))) < K.width // 2 else 5.0
    return z <= rendered + tol


def test_two_plane_occlusion_matches_ray_cast_oracle():
    view = _two_plane_view()
    rng = np.random.default_rng(11)
    # Sample points on both planes plus jittered depths.
    pts = []
    for _ in range(300):
        u = rng.uniform(0, K.width - 1e-6)
        v = rng.uniform(0, K.height - 1e-6)
        z = rng.choice([2.0, 5.0, rng.uniform(0.5, 8.0)])
        pts.append(unproject_pixels(np.array([u]), np.array([v]), np.array([z]), IDENTITY, K)[0])
    cloud = _StubCloud(np.array(pts))
    for i in range(len(pts)):
        expected = _two_plane_oracle(cloud.positions[i], 1e-6)
        assert visible_in_view(i, cloud, view, 1e-6) == expected


def test_far_plane_point_behind_near_plane_is_hidden():
    view = _two_plane_view()
    # A point on the far plane but projecting into the near-plane half.
    point = unproject_pixels(np.array([4.0]), np.array([16.0]), np.array([5.0]), IDENTITY, K)
    cloud = _StubCloud(point)
    assert not visible_in_view(0, cloud, view, 1e-3)


def test_point_behind_camera_not_visible():
    view = _two_plane_view()
    cloud = _StubCloud(np.array([[0.0, 0.0, -2.0]]))
    assert not visible_in_view(0, cloud, view, 1e-3)


def test_visibility_monotone_in_tolerance():
    view = _two_plane_view()
    rng = np.random.default_rng(5)
    pts = unproject_pixels(
        rng.uniform(0, 31.99, size=50), rng.uniform(0, 31.99, size=50), rng.uniform(0.5, 9.0, size=50), IDENTITY, K
    )
    cloud = _StubCloud(pts)
    tolerances = [0.0, 0.5, 1.0, 2.0, 4.0, 8.0]
    for i in range(50):
        flags = [visible_in_view(i, cloud, view, t) for t in tolerances]
        assert flags == sorted(flags)  # never flips back to False as tol grows
