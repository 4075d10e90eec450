"""Pinhole projection and back-projection."""
from typing import NamedTuple, Tuple

import numpy as np

from hybrid_pad.core.types import CameraModel, Pose


class ProjectedPoint(NamedTuple):
    """Pixel coordinates and camera-space depth; u, v are NaN when the point is behind the camera."""

    u: float
    v: float
    depth: float
    valid: bool


def project_point(point: np.ndarray, pose: Pose, cam: CameraModel) -> ProjectedPoint:
    x, y, z = pose.transform(np.asarray(point, dtype=np.float64).reshape(1, 3))[0]
    if z <= 0:
        return ProjectedPoint(float("nan"), float("nan"), float(z), False)
    return ProjectedPoint(float(cam.fx * x / z + cam.cx), float(cam.fy * y / z + cam.cy), float(z), True)


def project_points(points: np.ndarray, pose: Pose, cam: CameraModel) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorized projection of (N, 3) world points -> ((N, 2) pixels, (N,) depths).

    Pixels of points with depth <= 0 are NaN.
    """
    pc = pose.transform(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    z = pc[:, 2]
    uv = np.full((len(pc), 2), np.nan)
    front = z > 0
    uv[front, 0] = cam.fx * pc[front, 0] / z[front] + cam.cx
    uv[front, 1] = cam.fy * pc[front, 1] / z[front] + cam.cy
    return uv, z


def unproject(u: float, v: float, depth: float, pose: Pose, cam: CameraModel) -> np.ndarray:
    """World point seen at pixel (u, v) with camera-space depth `depth`."""
    pc = np.array([(u - cam.cx) / cam.fx * depth, (v - cam.cy) / cam.fy * depth, depth])
    return pose.rotation.T @ (pc - pose.translation)


def pixel_rays(cam: CameraModel, pose: Pose, rows: np.ndarray, cols: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """World-space ray origins and unit directions through pixel coordinates (rows = v, cols = u)."""
    d_cam = np.stack(
        [(cols - cam.cx) / cam.fx, (rows - cam.cy) / cam.fy, np.ones_like(cols, dtype=np.float64)],
        axis=-1,
    )
    d_world = d_cam @ pose.rotation
    d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
    origins = np.broadcast_to(pose.center, d_world.shape)
    return origins, d_world


def projection_matrix(pose: Pose, cam: CameraModel) -> np.ndarray:
    """3x4 matrix K [R | t]."""
    return cam.K @ np.hstack([pose.rotation, pose.translation[:, None]])
