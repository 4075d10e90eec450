"""Perspective-n-point: 6-point DLT hypotheses in RANSAC, refined by reprojection-error minimization."""
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.optimize import least_squares

from hybrid_pad.core.errors import LocalizationError
from hybrid_pad.core.geometry.rotations import matrix_to_rotvec, rotvec_to_matrix
from hybrid_pad.core.sfm.sfm_config import SfmConfig
from hybrid_pad.core.types import CameraModel, Pose

logger = logging.getLogger(__name__)

MIN_CORRESPONDENCES = 6


@dataclass
class PnpResult:
    pose: Pose
    inliers: np.ndarray
    iterations: int


def _similarity_normalization(points: np.ndarray) -> np.ndarray:
    """Transform moving the centroid to the origin with mean distance sqrt(dim)."""
    dim = points.shape[1]
    centroid = points.mean(axis=0)
    mean_dist = np.mean(np.linalg.norm(points - centroid, axis=1))
    scale = np.sqrt(dim) / mean_dist if mean_dist > 1e-12 else 1.0
    T = np.eye(dim + 1)
    T[:dim, :dim] *= scale
    T[:dim, dim] = -scale * centroid
    return T


def dlt_pose(xn: np.ndarray, X: np.ndarray) -> Optional[tuple]:
    """Pose (R, t) from >= 6 normalized image points and world points, or None if degenerate."""
    Tx = _similarity_normalization(xn)
    TX = _similarity_normalization(X)
    xh = np.column_stack([xn, np.ones(len(xn))]) @ Tx.T
    Xh = np.column_stack([X, np.ones(len(X))]) @ TX.T
    zeros = np.zeros_like(Xh)
    A = np.vstack(
        [
            np.hstack([Xh, zeros, -xh[:, :1] * Xh]),
            np.hstack([zeros, Xh, -xh[:, 1:2] * Xh]),
        ]
    )
    _, s, vt = np.linalg.svd(A)
    if s[-2] < 1e-12:
        return None
    P = np.linalg.inv(Tx) @ vt[-1].reshape(3, 4) @ TX
    M = P[:, :3]
    det = np.linalg.det(M)
    if not np.isfinite(det) or abs(det) < 1e-15:
        return None
    P = P * np.sign(det)
    U, S, Vt = np.linalg.svd(P[:, :3])
    R = U @ Vt
    if np.linalg.det(R) < 0:
        return None
    t = P[:, 3] / S.mean()
    depth = X @ R[2] + t[2]
    if np.median(depth) <= 0:
        return None
    return R, t


def _reprojection_errors(R: np.ndarray, t: np.ndarray, uv: np.ndarray, X: np.ndarray, cam: CameraModel) -> np.ndarray:
    pc = X @ R.T + t
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam.fx * pc[:, 0] / z + cam.cx
        v = cam.fy * pc[:, 1] / z + cam.cy
    err = np.hypot(u - uv[:, 0], v - uv[:, 1])
    return np.where(z > 0, err, np.inf)


def _refine(R: np.ndarray, t: np.ndarray, uv: np.ndarray, X: np.ndarray, cam: CameraModel) -> tuple:
    def residuals(x: np.ndarray) -> np.ndarray:
        pc = X @ rotvec_to_matrix(x[:3]).T + x[3:]
        z = np.where(np.abs(pc[:, 2]) > 1e-9, pc[:, 2], 1e-9)
        return np.concatenate(
            [cam.fx * pc[:, 0] / z + cam.cx - uv[:, 0], cam.fy * pc[:, 1] / z + cam.cy - uv[:, 1]]
        )

    x0 = np.concatenate([matrix_to_rotvec(R), t])
    result = least_squares(residuals, x0, method="lm", xtol=1e-15, ftol=1e-15, max_nfev=200)
    return rotvec_to_matrix(result.x[:3]), result.x[3:]


def _required_iterations(inlier_ratio: float, confidence: float, sample_size: int) -> float:
    good = inlier_ratio**sample_size
    if good >= 1.0:
        return 0.0
    if good <= 0.0:
        return np.inf
    return np.log(1.0 - confidence) / np.log(1.0 - good)


def solve_pnp_ransac(
    uv: np.ndarray,
    xyz: np.ndarray,
    cam: CameraModel,
    cfg: Optional[SfmConfig] = None,
    seed: int = 0,
) -> PnpResult:
    """Robust camera pose from 2D-3D correspondences; raises LocalizationError when unreliable."""
    cfg = cfg or SfmConfig()
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    n = len(uv)
    if n < MIN_CORRESPONDENCES:
        raise LocalizationError("too few correspondences", n_matches=n)
    xn = np.column_stack([(uv[:, 0] - cam.cx) / cam.fx, (uv[:, 1] - cam.cy) / cam.fy])

    rng = np.random.default_rng(seed)
    best_inliers = np.zeros(0, dtype=np.int64)
    best_cost = np.inf
    best_model = None
    max_iterations = cfg.ransac_max_iterations
    iteration = 0
    while iteration < max_iterations:
        iteration += 1
        sample = rng.choice(n, MIN_CORRESPONDENCES, replace=False)
        model = dlt_pose(xn[sample], xyz[sample])
        if model is None:
            continue
        errors = _reprojection_errors(*model, uv, xyz, cam)
        inliers = np.flatnonzero(errors < cfg.ransac_threshold)
        cost = np.sum(np.minimum(errors, cfg.ransac_threshold))
        if len(inliers) > len(best_inliers) or (len(inliers) == len(best_inliers) and cost < best_cost):
            best_inliers, best_cost, best_model = inliers, cost, model
            needed = _required_iterations(len(inliers) / n, cfg.ransac_confidence, MIN_CORRESPONDENCES)
            max_iterations = int(min(cfg.ransac_max_iterations, max(cfg.ransac_min_iterations, np.ceil(needed))))

    min_inliers = max(cfg.pnp_min_inliers, MIN_CORRESPONDENCES)
    if best_model is None or len(best_inliers) < min_inliers:
        raise LocalizationError("too few inliers", n_matches=n, n_inliers=len(best_inliers))

    R, t = best_model
    inliers = best_inliers
    for _ in range(2):
        R, t = _refine(R, t, uv[inliers], xyz[inliers], cam)
        refreshed = np.flatnonzero(_reprojection_errors(R, t, uv, xyz, cam) < cfg.ransac_threshold)
        if len(refreshed) < min_inliers:
            break
        inliers = refreshed

    if len(inliers) < min_inliers or len(inliers) / n < cfg.min_inlier_ratio:
        raise LocalizationError("too few inliers", n_matches=n, n_inliers=len(inliers))
    logger.debug(f"PnP: {len(inliers)}/{n} inliers after {iteration} iterations")
    return PnpResult(Pose.from_matrix(R, t), inliers, iteration)
