"""Image- and pixel-level ROC area."""
from typing import Sequence, Union

import numpy as np
from sklearn.metrics import auc, roc_curve

from hybrid_pad.core.anomaly.scoring import AnomalyMap
from hybrid_pad.core.errors import MetricError

MapLike = Union[AnomalyMap, np.ndarray]


def _map_values(m: MapLike) -> np.ndarray:
    return m.scores if isinstance(m, AnomalyMap) else np.asarray(m, dtype=np.float64)


def auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Trapezoidal ROC area over all distinct thresholds; tied scores form one step."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).astype(bool).ravel()
    if scores.shape != labels.shape:
        raise ValueError(f"{len(scores)} scores but {len(labels)} labels")
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == len(labels):
        raise MetricError(f"AUROC undefined: {n_pos} positives among {len(labels)} samples")
    fpr, tpr, _ = roc_curve(labels, scores, drop_intermediate=False)
    return float(auc(fpr, tpr))


def pooled_pixels(maps: Sequence[MapLike], masks: Sequence[np.ndarray]):
    if len(maps) != len(masks):
        raise ValueError(f"{len(maps)} maps but {len(masks)} masks")
    values, labels = [], []
    for i, (m, mask) in enumerate(zip(maps, masks)):
        scores = _map_values(m)
        mask = np.asarray(mask).astype(bool)
        if scores.shape != mask.shape:
            raise ValueError(f"Map {i} has shape {scores.shape} but its mask has {mask.shape}")
        values.append(scores.ravel())
        labels.append(mask.ravel())
    if not values:
        raise MetricError("No maps to evaluate")
    return np.concatenate(values), np.concatenate(labels)


def pixel_auroc(maps: Sequence[MapLike], masks: Sequence[np.ndarray]) -> float:
    """AUROC over the pooled pixels of all images."""
    return auroc(*pooled_pixels(maps, masks))
