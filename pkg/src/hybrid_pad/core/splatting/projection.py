"""EWA projection of 3D Gaussians into screen-space splats."""
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import torch

from hybrid_pad.core.splatting.gaussians import GaussianCloud
from hybrid_pad.core.splatting.sh import eval_sh
from hybrid_pad.core.types import CameraModel, Pose

NEAR_PLANE = 0.2
COV2D_DILATION = 0.3
MASS_99_RADIUS = math.sqrt(-2.0 * math.log(0.01))
# Jacobian evaluated at the clamped direction for far off-frustum means
FRUSTUM_CLAMP = 1.3


@dataclass
class Splat2D:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    rgb: np.ndarray
    alpha: float


@dataclass
class Projection:
    """Per-Gaussian screen-space quantities; rows where `visible` is False are placeholders."""

    means2d: torch.Tensor
    cov2d: torch.Tensor
    conics: torch.Tensor
    depths: torch.Tensor
    rgb: torch.Tensor
    alpha: torch.Tensor
    radii: torch.Tensor
    visible: torch.Tensor


def quaternion_to_rotation(quats: torch.Tensor) -> torch.Tensor:
    """(N, 4) wxyz quaternions (any norm) -> (N, 3, 3) rotation matrices."""
    q = quats / torch.linalg.norm(quats, dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    rows = [
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ]  # fmt: skip
    return torch.stack(rows, dim=-1).reshape(*quats.shape[:-1], 3, 3)


def covariance_3d(quats: torch.Tensor, log_scales: torch.Tensor) -> torch.Tensor:
    """Sigma = R S S^T R^T."""
    M = quaternion_to_rotation(quats) * torch.exp(log_scales)[..., None, :]
    return M @ M.transpose(-1, -2)


def pose_tensors(pose: Pose, dtype: torch.dtype) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    R = torch.as_tensor(np.array(pose.rotation), dtype=dtype)
    t = torch.as_tensor(np.array(pose.translation), dtype=dtype)
    center = torch.as_tensor(pose.center, dtype=dtype)
    return R, t, center


def project_gaussians(cloud: GaussianCloud, pose: Pose, cam: CameraModel) -> Projection:
    """Project every Gaussian; differentiable with respect to all cloud tensors."""
    dtype = cloud.dtype
    R, t, center = pose_tensors(pose, dtype)
    p_cam = cloud.means @ R.T + t
    z = p_cam[:, 2]
    in_front = z > NEAR_PLANE
    z_safe = torch.where(in_front, z, torch.ones_like(z))

    mean_u = cam.fx * p_cam[:, 0] / z_safe + cam.cx
    mean_v = cam.fy * p_cam[:, 1] / z_safe + cam.cy
    means2d = torch.stack([mean_u, mean_v], dim=-1)

    lim_x = FRUSTUM_CLAMP * (0.5 * cam.width / cam.fx)
    lim_y = FRUSTUM_CLAMP * (0.5 * cam.height / cam.fy)
    tx = torch.clamp(p_cam[:, 0] / z_safe, -lim_x, lim_x) * z_safe
    ty = torch.clamp(p_cam[:, 1] / z_safe, -lim_y, lim_y) * z_safe
    zeros = torch.zeros_like(z_safe)
    J = torch.stack(
        [
            torch.stack([cam.fx / z_safe, zeros, -cam.fx * tx / z_safe**2], dim=-1),
            torch.stack([zeros, cam.fy / z_safe, -cam.fy * ty / z_safe**2], dim=-1),
        ],
        dim=-2,
    )
    T = J @ R
    cov2d = T @ covariance_3d(cloud.quats, cloud.log_scales) @ T.transpose(-1, -2)
    cov2d = cov2d + COV2D_DILATION * torch.eye(2, dtype=dtype)

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    det_ok = det > 0
    det_safe = torch.where(det_ok, det, torch.ones_like(det))
    conics = torch.stack([c / det_safe, -b / det_safe, a / det_safe], dim=-1)

    radii = MASS_99_RADIUS * torch.sqrt(torch.stack([a, c], dim=-1).detach().clamp_min(0.0))
    u, v = mean_u.detach(), mean_v.detach()
    overlaps = (
        (u + radii[:, 0] >= -0.5)
        & (u - radii[:, 0] <= cam.width - 0.5)
        & (v + radii[:, 1] >= -0.5)
        & (v - radii[:, 1] <= cam.height - 0.5)
    )
    visible = in_front & det_ok & overlaps

    dirs = cloud.means - center
    dirs = dirs / torch.linalg.norm(dirs, dim=-1, keepdim=True).clamp_min(1e-12)
    rgb = eval_sh(cloud.sh, dirs, cloud.active_sh_degree)
    return Projection(
        means2d=means2d,
        cov2d=cov2d,
        conics=conics,
        depths=z,
        rgb=rgb,
        alpha=cloud.opacities,
        radii=radii,
        visible=visible.detach(),
    )


def project_gaussian(cloud: GaussianCloud, pose: Pose, cam: CameraModel, index: int = 0) -> Optional[Splat2D]:
    """Screen-space splat of one Gaussian, or None when culled."""
    with torch.no_grad():
        proj = project_gaussians(cloud.index(torch.tensor([index])), pose, cam)
    if not bool(proj.visible[0]):
        return None
    return Splat2D(
        mean2d=proj.means2d[0].numpy().astype(np.float64),
        cov2d=proj.cov2d[0].numpy().astype(np.float64),
        depth=float(proj.depths[0]),
        rgb=proj.rgb[0].numpy().astype(np.float64),
        alpha=float(proj.alpha[0]),
    )
