"""Gaussian splatting optimization loop."""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from hybrid_pad.core.errors import TrainingDivergedError
from hybrid_pad.core.sfm.sparse_model import SparseModel
from hybrid_pad.core.splatting.densify import DensifyStats, densify_and_prune, reset_opacity
from hybrid_pad.core.splatting.gaussians import GaussianCloud, init_from_sparse
from hybrid_pad.core.splatting.image_metrics import compute_psnr, photometric_loss
from hybrid_pad.core.splatting.optimizer import AdamState, adam_step
from hybrid_pad.core.splatting.rasterizer import rasterize, rasterize_tensor
from hybrid_pad.core.splatting.train_config import TrainConfig
from hybrid_pad.core.types import CameraModel, ImageBuffer, Pose

logger = logging.getLogger(__name__)

View = Tuple[ImageBuffer, Pose]


@dataclass
class TrainResult:
    cloud: GaussianCloud
    psnr_log: List[Tuple[int, float]] = field(default_factory=list)
    loss_history: List[float] = field(default_factory=list)
    psnr_source: str = "training"


def scene_extent(poses: Sequence[Pose]) -> float:
    """1.1 x the largest camera-center distance from the mean center."""
    centers = np.stack([p.center for p in poses])
    radius = float(np.max(np.linalg.norm(centers - centers.mean(axis=0), axis=1)))
    return 1.1 * max(radius, 1e-6)


def select_training_views(views: Sequence[View], fraction: float, seed: int) -> List[View]:
    if fraction >= 1.0:
        return list(views)
    count = max(2, int(round(fraction * len(views))))
    chosen = np.sort(np.random.default_rng(seed).permutation(len(views))[:count])
    return [views[i] for i in chosen]


def position_lr(cfg: TrainConfig, extent: float, iteration: int) -> float:
    """Log-linear decay from lr_position to lr_position * final_factor, scaled by scene extent."""
    progress = min(max(iteration / max(cfg.iterations, 1), 0.0), 1.0)
    return cfg.lr_position * extent * math.exp(progress * math.log(cfg.lr_position_final_factor))


def learning_rates(cfg: TrainConfig, extent: float, iteration: int) -> Dict[str, float]:
    return {
        "means": position_lr(cfg, extent, iteration),
        "quats": cfg.lr_rotation,
        "log_scales": cfg.lr_scale,
        "opacity_logits": cfg.lr_opacity,
        "sh_dc": cfg.lr_sh_dc,
        "sh_rest": cfg.lr_sh_rest,
    }


def mean_psnr(cloud: GaussianCloud, views: Sequence[View], cam: CameraModel, cfg: TrainConfig) -> float:
    values = [compute_psnr(rasterize(cloud, pose, cam, cfg.background, cfg.tile_size), img) for img, pose in views]
    return float(np.mean(values)) if values else math.nan


def _step_parameters(
    cloud: GaussianCloud, state: AdamState, lrs: Dict[str, float]
) -> Dict[str, torch.Tensor]:
    # SH is stored as one tensor but the DC band and the rest use different learning rates.
    params = {k: v for k, v in cloud.parameters().items() if k != "sh"}
    grads = {k: v.grad for k, v in params.items()}
    sh_grad = cloud.sh.grad
    params["sh_dc"] = cloud.sh[:, :1]
    params["sh_rest"] = cloud.sh[:, 1:]
    grads["sh_dc"] = None if sh_grad is None else sh_grad[:, :1]
    grads["sh_rest"] = None if sh_grad is None else sh_grad[:, 1:]
    updated = adam_step(params, grads, state, lrs)
    updated["sh"] = torch.cat([updated.pop("sh_dc"), updated.pop("sh_rest")], dim=1)
    return updated


def train(
    refs: Sequence[View],
    sparse: SparseModel,
    cam: CameraModel,
    cfg: Optional[TrainConfig] = None,
    seed: int = 0,
    held_out: Optional[Sequence[View]] = None,
    dtype: torch.dtype = torch.float32,
) -> TrainResult:
    """Fit a Gaussian cloud to posed reference views, starting from the sparse model."""
    cfg = cfg or TrainConfig()
    if len(refs) < 2:
        raise ValueError(f"Training needs at least 2 views, got {len(refs)}")
    views = select_training_views(refs, cfg.image_fraction, seed)
    cloud = init_from_sparse(sparse, cfg.sh_degree, dtype)
    result = TrainResult(cloud, psnr_source="held-out" if held_out else "training")
    if cfg.iterations == 0:
        return result

    torch.manual_seed(seed)
    generator = torch.Generator().manual_seed(seed)
    rng = np.random.default_rng(seed)
    extent = scene_extent([pose for _, pose in views])
    targets = [torch.as_tensor(img.rgb(), dtype=dtype) for img, _ in views]
    state = AdamState()
    stats = DensifyStats.zeros(len(cloud))
    queue: List[int] = []
    logger.info(
        f"Training {len(cloud)} Gaussians on {len(views)} views for {cfg.iterations} iterations "
        f"(extent {extent:.3f})"
    )

    for it in range(1, cfg.iterations + 1):
        if not queue:
            queue = list(rng.permutation(len(views))[::-1])
        view = int(queue.pop())
        if it % cfg.sh_increment_interval == 0 and cloud.active_sh_degree < cloud.sh_degree:
            cloud.active_sh_degree += 1

        cloud = cloud.detach().requires_grad_()
        out = rasterize_tensor(cloud, views[view][1], cam, cfg.background, cfg.tile_size)
        loss = photometric_loss(out.image, targets[view], cfg.ssim_weight, cfg.ssim_window)
        loss_value = float(loss.detach())
        if not math.isfinite(loss_value):
            raise TrainingDivergedError(it, loss_value)
        loss.backward()
        result.loss_history.append(loss_value)

        in_window = it < cfg.densify_until
        if in_window and out.means2d.grad is not None:
            stats.update(out.means2d.grad, out.visible, cam.width, cam.height)

        cloud = cloud.replace(**_step_parameters(cloud, state, learning_rates(cfg, extent, it)))

        if in_window and it > cfg.densify_from and it % cfg.densify_interval == 0:
            cloud, source = densify_and_prune(cloud, stats, cfg, extent, generator)
            state.remap(source)
        if in_window and cfg.opacity_reset_interval > 0 and it % cfg.opacity_reset_interval == 0:
            cloud = reset_opacity(cloud)
            state.moments.pop("opacity_logits", None)

        if it % cfg.checkpoint_interval == 0 or it == cfg.iterations:
            psnr = mean_psnr(cloud, held_out or views, cam, cfg)
            result.psnr_log.append((it, psnr))
            logger.info(
                f"[{it}/{cfg.iterations}] loss {loss_value:.5f}, {len(cloud)} Gaussians, "
                f"SH degree {cloud.active_sh_degree}, {result.psnr_source} PSNR {psnr:.2f} dB"
            )

    result.cloud = cloud.detach()
    return result
