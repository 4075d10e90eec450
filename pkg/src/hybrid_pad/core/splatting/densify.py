"""Adaptive density control: clone, split and prune."""
import logging
from dataclasses import dataclass
from typing import Tuple

import torch

from hybrid_pad.core.splatting.gaussians import GaussianCloud
from hybrid_pad.core.splatting.projection import quaternion_to_rotation
from hybrid_pad.core.splatting.train_config import TrainConfig

logger = logging.getLogger(__name__)

SPLIT_CHILDREN = 2


@dataclass
class DensifyStats:
    """Accumulated screen-space positional gradient norms (NDC units) per Gaussian."""

    grad_sum: torch.Tensor
    count: torch.Tensor

    @classmethod
    def zeros(cls, n: int, dtype: torch.dtype = torch.float64) -> "DensifyStats":
        return cls(torch.zeros(n, dtype=dtype), torch.zeros(n, dtype=dtype))

    def update(self, means2d_grad: torch.Tensor, visible: torch.Tensor, width: int, height: int) -> None:
        scale = torch.tensor([0.5 * width, 0.5 * height], dtype=means2d_grad.dtype)
        norms = torch.linalg.norm(means2d_grad.detach() * scale, dim=-1).to(self.grad_sum.dtype)
        self.grad_sum[visible] += norms[visible]
        self.count[visible] += 1

    def mean(self) -> torch.Tensor:
        return torch.where(self.count > 0, self.grad_sum / self.count.clamp_min(1), torch.zeros_like(self.grad_sum))


def densify_and_prune(
    cloud: GaussianCloud,
    stats: DensifyStats,
    cfg: TrainConfig,
    scene_extent: float,
    generator: torch.Generator,
) -> Tuple[GaussianCloud, torch.Tensor]:
    """Returns the new cloud and, per new row, the source row in `cloud` (-1 for created rows).

    `stats` is reset to zeros sized for the new cloud.
    """
    n = len(cloud)
    if n == 0:
        return cloud, torch.zeros(0, dtype=torch.int64)
    grads = stats.mean()
    hot = grads > cfg.densify_grad_threshold
    max_scale = cloud.scales.detach().max(dim=-1).values
    small = max_scale <= cfg.percent_dense * scene_extent
    clone_idx = torch.nonzero(hot & small).flatten()
    split_idx = torch.nonzero(hot & ~small).flatten()

    params = {k: v.detach() for k, v in cloud.parameters().items()}
    keep_idx = torch.nonzero(~(hot & ~small)).flatten()
    parts = [{k: v[keep_idx] for k, v in params.items()}]
    sources = [keep_idx]

    if len(clone_idx):
        parts.append({k: v[clone_idx].clone() for k, v in params.items()})
        sources.append(torch.full((len(clone_idx),), -1, dtype=torch.int64))

    if len(split_idx):
        rep = split_idx.repeat_interleave(SPLIT_CHILDREN)
        scales = torch.exp(params["log_scales"][rep])
        noise = torch.randn(scales.shape, generator=generator, dtype=scales.dtype)
        rot = quaternion_to_rotation(params["quats"][rep])
        offsets = (rot @ (noise * scales)[..., None])[..., 0]
        child = {k: v[rep].clone() for k, v in params.items()}
        child["means"] = params["means"][rep] + offsets
        child["log_scales"] = torch.log(scales / cfg.split_scale_factor)
        parts.append(child)
        sources.append(torch.full((len(rep),), -1, dtype=torch.int64))

    merged = {k: torch.cat([p[k] for p in parts], dim=0) for k in params}
    source = torch.cat(sources)
    alive = torch.sigmoid(merged["opacity_logits"]) >= cfg.prune_opacity
    merged = {k: v[alive] for k, v in merged.items()}
    source = source[alive]

    result = cloud.replace(**merged)
    stats.grad_sum = torch.zeros(len(result), dtype=stats.grad_sum.dtype)
    stats.count = torch.zeros(len(result), dtype=stats.count.dtype)
    logger.debug(
        f"Densify: {len(clone_idx)} cloned, {len(split_idx)} split, "
        f"{int((~alive).sum())} pruned, {n} -> {len(result)} Gaussians"
    )
    return result, source


def reset_opacity(cloud: GaussianCloud, ceiling: float = 0.01) -> GaussianCloud:
    """Clamp every opacity to at most `ceiling`."""
    logit = torch.log(torch.tensor(ceiling / (1.0 - ceiling), dtype=cloud.dtype))
    return cloud.replace(opacity_logits=torch.minimum(cloud.opacity_logits.detach(), logit))
