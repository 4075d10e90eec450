"""Functional SE(3) API and pose error measures."""
import numpy as np

from hybrid_pad.core.geometry.rotations import quaternion_to_matrix
from hybrid_pad.core.types import Pose


def se3_compose(a: Pose, b: Pose) -> Pose:
    """Pose that applies b, then a."""
    return a.compose(b)


def se3_inverse(p: Pose) -> Pose:
    return p.inverse()


def rotation_error_deg(a: Pose, b: Pose) -> float:
    """Angle of the relative rotation between two poses, in degrees."""
    R = quaternion_to_matrix(a.quaternion) @ quaternion_to_matrix(b.quaternion).T
    cos = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.degrees(np.arccos(cos)))


def translation_error(a: Pose, b: Pose) -> float:
    """Distance between the two camera centers, in world units."""
    return float(np.linalg.norm(a.center - b.center))


def look_at(center: np.ndarray, target: np.ndarray, up: np.ndarray = np.array([0.0, 0.0, 1.0])) -> Pose:
    """World -> camera pose of a camera at `center` looking at `target` (x right, y down, z forward)."""
    center = np.asarray(center, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - center
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-9:
        raise ValueError("Viewing direction parallel to the up vector")
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    return Pose.from_matrix(R, -R @ center)
