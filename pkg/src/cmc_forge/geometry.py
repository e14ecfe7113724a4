"""Pinhole-camera math shared by every other module.

Conventions, fixed package-wide and asserted in tests:

  * extrinsics map world to camera: ``x_cam = R @ x_world + t``
  * the camera looks along +z; points with z_cam <= 0 are behind it
  * image origin is the top-left corner; u runs right (columns), v runs
    down (rows); a pixel is inside the image iff 0 <= u < width and
    0 <= v < height
  * depth always means camera-space z, not ray length

Sub-pixel coordinates are snapped to the nearest integer pixel whenever a
per-pixel raster (labels, depth) is indexed.
"""

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from cmc_forge.errors import ConfigError, ContractError, DomainError


@dataclass(frozen=True)
class CameraIntrinsics:
    """Focal lengths and principal point, in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigError(f"focal lengths must be positive, got ({self.fx}, {self.fy})")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ConfigError(
                f"principal point ({self.cx}, {self.cy}) outside image "
                f"{self.width}x{self.height}"
            )


@dataclass(frozen=True)
class CameraPose:
    """World-to-camera rigid transform: x_cam = rotation @ x_world + translation."""

    rotation: np.ndarray  # (3, 3), orthonormal, det +1
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64)
        trans = np.asarray(self.translation, dtype=np.float64)
        if rot.shape != (3, 3) or trans.shape != (3,):
            raise ConfigError("pose needs a 3x3 rotation and a 3-vector translation")
        err = np.abs(rot.T @ rot - np.eye(3)).max()
        if err >= 1e-9 or np.linalg.det(rot) < 0:
            raise ConfigError(f"rotation is not orthonormal with det +1 (|R^T R - I| = {err:.2e})")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)


@dataclass(frozen=True)
class PixelCoord:
    """Sub-pixel image coordinate in a specific view."""

    u: float
    v: float
    view_id: int


class Projection(NamedTuple):
    u: float
    v: float
    depth: float


@dataclass(frozen=True)
class Correspondence:
    """A (3D point, 2D pixel) pair linked by unprojection provenance."""

    point_index: int
    pixel: PixelCoord
    depth: float


def camera_center(pose: CameraPose) -> np.ndarray:
    """World-space position of the optical center: C = -R^T t."""
    return -pose.rotation.T @ pose.translation


def project_points(points: np.ndarray, pose: CameraPose, intrinsics: CameraIntrinsics):
    """Vectorized projection of (N, 3) world points.

    Returns (u, v, depth, inside) arrays; ``inside`` is True where depth > 0
    and the pixel lies inside the image. u/v are unreliable where depth <= 0.
    """
    points = np.asarray(points, dtype=np.float64)
    cam = points @ pose.rotation.T + pose.translation
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intrinsics.fx * cam[:, 0] / z + intrinsics.cx
        v = intrinsics.fy * cam[:, 1] / z + intrinsics.cy
    inside = (
        (z > 0)
        & (u >= 0)
        & (u < intrinsics.width)
        & (v >= 0)
        & (v < intrinsics.height)
    )
    return u, v, z, inside


def project(
    point: np.ndarray, pose: CameraPose, intrinsics: CameraIntrinsics, view_id: int = -1
) -> Optional[tuple[PixelCoord, float]]:
    """Project one world point; None when behind the camera or off-image."""
    point = np.asarray(point, dtype=np.float64)
    if point.shape != (3,):
        raise ContractError(f"expected a 3-vector, got shape {point.shape}")
    u, v, z, inside = project_points(point[None, :], pose, intrinsics)
    if not inside[0]:
        return None
    return PixelCoord(float(u[0]), float(v[0]), view_id), float(z[0])


def unproject_pixels(
    u: np.ndarray, v: np.ndarray, depth: np.ndarray, pose: CameraPose, intrinsics: CameraIntrinsics
) -> np.ndarray:
    """Vectorized inverse of project_points for arrays of pixel coords."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    x = (u - intrinsics.cx) * depth / intrinsics.fx
    y = (v - intrinsics.cy) * depth / intrinsics.fy
    cam = np.stack([x, y, depth], axis=-1)
    return (cam - pose.translation) @ pose.rotation


def unproject(
    pixel: PixelCoord, depth: float, pose: CameraPose, intrinsics: CameraIntrinsics
) -> np.ndarray:
    """Lift a pixel with positive depth into a world point."""
    if not depth > 0:
        raise DomainError(f"depth must be positive, got {depth}")
    return unproject_pixels(
        np.array([pixel.u]), np.array([pixel.v]), np.array([depth]), pose, intrinsics
    )[0]


def snap_to_raster(u, v, width: int, height: int):
    """Nearest-integer pixel indices, clamped to the raster bounds."""
    col = np.clip(np.rint(u).astype(np.int64), 0, width - 1)
    row = np.clip(np.rint(v).astype(np.int64), 0, height - 1)
    return row, col


def visible_in_view(point_index: int, cloud, view, z_tolerance: float) -> bool:
    """Z-buffer visibility of one cloud point in a rendered view.

    True iff the point projects inside the view with positive depth and its
    depth exceeds the view's rendered depth at that pixel by at most
    z_tolerance.
    """
    n = len(cloud.positions)
    if not (0 <= point_index < n):
        raise ContractError(f"point_index {point_index} out of range [0, {n})")
    u, v, z, inside = project_points(cloud.positions[point_index][None, :], view.pose, view.intrinsics)
    if not inside[0]:
        return False
    row, col = snap_to_raster(u[0], v[0], view.intrinsics.width, view.intrinsics.height)
    return bool(z[0] <= view.gt_depth[row, col] + z_tolerance)
