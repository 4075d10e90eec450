import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from hybrid_pad.core.anomaly.anomaly_config import AnomalyConfig
from hybrid_pad.core.anomaly.features import FeaturePyramid, extract_features
from hybrid_pad.core.types import ImageBuffer

logger = logging.getLogger(__name__)

SMOOTHING_TRUNCATE = 4.0


@dataclass(eq=False)
class AnomalyMap:
    """Non-negative per-pixel scores on the fixed scoring grid; the image score is their maximum."""

    scores: np.ndarray

    def __post_init__(self) -> None:
        scores = np.asarray(self.scores, dtype=np.float64)
        if scores.ndim != 2:
            raise ValueError(f"Anomaly map must be 2-D, got shape {scores.shape}")
        self.scores = scores

    @property
    def shape(self) -> tuple:
        return self.scores.shape

    @property
    def image_score(self) -> float:
        return score_image(self)


def score_image(anomaly_map: AnomalyMap) -> float:
    return float(np.max(anomaly_map.scores))


def resize_map(values: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of an (H, W) map to (size, size) with half-pixel centers."""
    if values.shape == (size, size):
        return values.astype(np.float64)
    tensor = torch.from_numpy(np.ascontiguousarray(values, dtype=np.float64))[None, None]
    resized = F.interpolate(tensor, size=(size, size), mode="bilinear", align_corners=False)
    return resized[0, 0].numpy()


def resize_mask(mask: np.ndarray, size: int) -> np.ndarray:
    """Ground-truth mask on the scoring grid: bilinear coverage thresholded at 0.5."""
    return resize_map(np.asarray(mask, dtype=np.float64), size) >= 0.5


def difference_maps(
    query: ImageBuffer, pseudo_ref: ImageBuffer, fq: FeaturePyramid, fr: FeaturePyramid
) -> List[np.ndarray]:
    """Per-pixel L2 norms: RGB difference first, then one map per pyramid level."""
    if query.shape != pseudo_ref.shape:
        raise ValueError(f"Query {query.shape} and pseudo-reference {pseudo_ref.shape} differ in size")
    if fq.shapes != fr.shapes:
        raise ValueError(f"Feature pyramids differ in shape: {fq.shapes} vs {fr.shapes}")
    maps = [np.linalg.norm(query.rgb() - pseudo_ref.rgb(), axis=-1)]
    for a, b in zip(fq.levels, fr.levels):
        maps.append(np.linalg.norm(a.astype(np.float64) - b.astype(np.float64), axis=-1))
    return maps


def compute_anomaly_map(
    query: ImageBuffer,
    pseudo_ref: ImageBuffer,
    fq: Optional[FeaturePyramid] = None,
    fr: Optional[FeaturePyramid] = None,
    cfg: Optional[AnomalyConfig] = None,
) -> AnomalyMap:
    """Unnormalized map: six difference maps resized, summed and Gaussian-smoothed."""
    cfg = cfg or AnomalyConfig()
    fq = fq if fq is not None else extract_features(query, cfg.blur_sigma)
    fr = fr if fr is not None else extract_features(pseudo_ref, cfg.blur_sigma)
    total = np.zeros((cfg.map_size, cfg.map_size))
    for component in difference_maps(query, pseudo_ref, fq, fr):
        total += resize_map(component, cfg.map_size)
    if cfg.smoothing_sigma > 0:
        total = ndimage.gaussian_filter(total, cfg.smoothing_sigma, mode="reflect", truncate=SMOOTHING_TRUNCATE)
    return AnomalyMap(np.maximum(total, 0.0))


def normalize_anomaly_maps(maps: Sequence[AnomalyMap], mode: str = "set") -> List[AnomalyMap]:
    """Min-max scaling to [0, 1]: over the whole set, per image, or not at all.

    A constant range (max == min) yields all-zero maps.
    """
    if mode == "none":
        return [AnomalyMap(m.scores.copy()) for m in maps]
    if mode == "per_image":
        return [_min_max(m, float(m.scores.min()), float(m.scores.max())) for m in maps]
    if mode == "set":
        if not maps:
            return []
        lo = min(float(m.scores.min()) for m in maps)
        hi = max(float(m.scores.max()) for m in maps)
        logger.debug(f"Set normalization range [{lo:.6g}, {hi:.6g}] over {len(maps)} maps")
        return [_min_max(m, lo, hi) for m in maps]
    raise ValueError(f"Unknown normalization mode '{mode}'")


def _min_max(anomaly_map: AnomalyMap, lo: float, hi: float) -> AnomalyMap:
    if hi <= lo:
        return AnomalyMap(np.zeros_like(anomaly_map.scores))
    return AnomalyMap(np.clip((anomaly_map.scores - lo) / (hi - lo), 0.0, 1.0))
