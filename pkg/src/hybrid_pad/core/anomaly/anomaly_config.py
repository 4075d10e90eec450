from dataclasses import dataclass
from typing import Optional

NORMALIZATION_MODES = ("set", "per_image", "none")


@dataclass
class AnomalyConfig:
    map_size: int = 224
    smoothing_sigma: float = 4.0
    blur_sigma: float = 1.0
    normalization: str = "set"
    feature_sidecar_dir: Optional[str] = None

    def __post_init__(self) -> None:
        if self.normalization not in NORMALIZATION_MODES:
            raise ValueError(f"normalization must be one of {NORMALIZATION_MODES}, got '{self.normalization}'")
        if self.smoothing_sigma < 0:
            raise ValueError(f"smoothing_sigma must be >= 0, got {self.smoothing_sigma}")
        if self.map_size <= 0:
            raise ValueError(f"map_size must be positive, got {self.map_size}")
