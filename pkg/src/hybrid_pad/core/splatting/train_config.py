from dataclasses import dataclass, field
from typing import List


@dataclass
class TrainConfig:
    """Gaussian splatting training recipe (SfM init, 15k iterations, densify every 1000, SH degree 3)."""

    iterations: int = 15000
    densify_interval: int = 1000
    sh_degree: int = 3

    lr_position: float = 1.6e-4
    lr_position_final_factor: float = 0.01
    lr_sh_dc: float = 2.5e-3
    lr_sh_rest: float = 1.25e-4
    lr_opacity: float = 5e-2
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3

    ssim_weight: float = 0.2
    ssim_window: int = 11

    densify_from: int = 500
    densify_until: int = 10000
    densify_grad_threshold: float = 2e-4
    percent_dense: float = 0.01
    split_scale_factor: float = 1.6
    prune_opacity: float = 0.005
    opacity_reset_interval: int = 0

    sh_increment_interval: int = 1000
    image_fraction: float = 1.0
    checkpoint_interval: int = 1000
    background: List[float] = field(default_factory=lambda: [1.0, 1.0, 1.0])
    tile_size: int = 16

    def __post_init__(self) -> None:
        if self.iterations < 0:
            raise ValueError(f"iterations must be >= 0, got {self.iterations}")
        if not 0.0 <= self.ssim_weight <= 1.0:
            raise ValueError(f"ssim_weight must be in [0, 1], got {self.ssim_weight}")
        if self.sh_degree not in (0, 1, 2, 3):
            raise ValueError(f"sh_degree must be 0..3, got {self.sh_degree}")
        if self.densify_interval <= 0:
            raise ValueError(f"densify_interval must be positive, got {self.densify_interval}")
        if not 0.0 < self.image_fraction <= 1.0:
            raise ValueError(f"image_fraction must be in (0, 1], got {self.image_fraction}")
