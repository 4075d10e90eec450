import math
from typing import Union

import numpy as np
import torch
from torchmetrics.functional.image import structural_similarity_index_measure

from hybrid_pad.core.types import ImageBuffer


def compute_psnr(a: Union[ImageBuffer, np.ndarray], b: Union[ImageBuffer, np.ndarray]) -> float:
    """10 log10(1 / MSE) on [0, 1] images; identical images give inf."""
    x = a.rgb() if isinstance(a, ImageBuffer) else np.asarray(a, dtype=np.float64)
    y = b.rgb() if isinstance(b, ImageBuffer) else np.asarray(b, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"PSNR needs equal shapes, got {x.shape} and {y.shape}")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def ssim(render: torch.Tensor, target: torch.Tensor, window: int = 11) -> torch.Tensor:
    """Gaussian-window SSIM (sigma 1.5) of two (H, W, 3) tensors in [0, 1]."""
    return structural_similarity_index_measure(
        render.permute(2, 0, 1)[None],
        target.permute(2, 0, 1)[None],
        gaussian_kernel=True,
        sigma=1.5,
        kernel_size=window,
        data_range=1.0,
    )


def photometric_loss(render: torch.Tensor, target: torch.Tensor, ssim_weight: float, window: int = 11) -> torch.Tensor:
    """(1 - w) * L1 + w * (1 - SSIM)."""
    l1 = torch.mean(torch.abs(render - target))
    if ssim_weight == 0.0:
        return l1
    return (1.0 - ssim_weight) * l1 + ssim_weight * (1.0 - ssim(render, target, window))
