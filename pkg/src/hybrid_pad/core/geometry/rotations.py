"""Quaternion helpers in (w, x, y, z) order on top of scipy's Rotation."""
import numpy as np
from scipy.spatial.transform import Rotation


def canonicalize_quaternion(q: np.ndarray) -> np.ndarray:
    """Normalize and pick the sign with w >= 0 (first nonzero component positive if w == 0)."""
    q = np.asarray(q, dtype=np.float64).reshape(4)
    norm = np.linalg.norm(q)
    if not np.isfinite(norm) or norm == 0.0:
        raise ValueError(f"Invalid quaternion: {q}")
    if abs(norm - 1.0) > 1e-12:
        q = q / norm
    nonzero = np.flatnonzero(q)
    if q[nonzero[0]] < 0:
        q = -q
    return q


def to_scipy(q: np.ndarray) -> Rotation:
    """(w, x, y, z) -> scipy Rotation."""
    q = np.asarray(q, dtype=np.float64)
    return Rotation.from_quat(np.concatenate([q[..., 1:], q[..., :1]], axis=-1))


def from_scipy(rot: Rotation) -> np.ndarray:
    """scipy Rotation -> canonical (w, x, y, z)."""
    xyzw = rot.as_quat()
    return canonicalize_quaternion(np.concatenate([xyzw[3:], xyzw[:3]]))


def quaternion_to_matrix(q: np.ndarray) -> np.ndarray:
    return to_scipy(q).as_matrix()


def matrix_to_quaternion(R: np.ndarray) -> np.ndarray:
    return from_scipy(Rotation.from_matrix(np.asarray(R, dtype=np.float64)))


def rotvec_to_matrix(rotvec: np.ndarray) -> np.ndarray:
    return Rotation.from_rotvec(np.asarray(rotvec, dtype=np.float64)).as_matrix()


def matrix_to_rotvec(R: np.ndarray) -> np.ndarray:
    return Rotation.from_matrix(np.asarray(R, dtype=np.float64)).as_rotvec()
