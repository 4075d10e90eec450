from dataclasses import dataclass
from typing import Optional


@dataclass
class SfmConfig:
    """Configuration for feature extraction, triangulation and localization."""

    # global descriptor
    descriptor_grid: int = 8
    orientation_bins: int = 64

    # keypoints
    max_keypoints: int = 2048
    harris_k: float = 0.04
    harris_sigma: float = 1.5
    harris_relative_threshold: float = 0.01
    harris_absolute_threshold: float = 1e-6
    nms_radius: int = 3
    border: int = 3
    keypoint_sidecar_dir: Optional[str] = None

    # matching
    ratio_threshold: float = 0.85

    # triangulation
    pair_retrieval_k: int = 10
    epipolar_threshold: float = 2.0
    reprojection_threshold: float = 2.0
    min_triangulation_angle_deg: float = 1.0
    min_baseline: float = 1e-6

    # localization
    retrieval_k: int = 15
    ransac_threshold: float = 4.0
    ransac_max_iterations: int = 2000
    ransac_min_iterations: int = 32
    ransac_confidence: float = 0.999
    min_inlier_ratio: float = 0.1
    pnp_min_inliers: int = 6
    min_query_inliers: int = 20
