"""Per-region overlap and its area under the false-positive-rate curve."""
import logging
from typing import List, Sequence

import numpy as np
from scipy import ndimage
from sklearn.metrics import auc

from hybrid_pad.core.errors import MetricError
from hybrid_pad.core.metrics.roc import MapLike, _map_values, pooled_pixels

logger = logging.getLogger(__name__)

EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


def connected_regions(mask: np.ndarray) -> List[np.ndarray]:
    """8-connected components as (k, 2) row/col arrays, ordered by their first pixel in raster order."""
    labels, count = ndimage.label(np.asarray(mask).astype(bool), structure=EIGHT_CONNECTED)
    if count == 0:
        return []
    flat = labels.ravel()
    order = np.argsort(flat, kind="stable")
    sizes = np.bincount(flat, minlength=count + 1)
    groups = np.split(order[sizes[0]:], np.cumsum(sizes[1:])[:-1])
    return [np.column_stack(np.unravel_index(g, labels.shape)) for g in groups]


def pro_at_threshold(maps: Sequence[MapLike], regions: Sequence[List[np.ndarray]], threshold: float) -> float:
    """Mean over all regions of all images of the covered fraction of each region (score >= threshold)."""
    overlaps = []
    for m, image_regions in zip(maps, regions):
        predicted = _map_values(m) >= threshold
        for region in image_regions:
            overlaps.append(predicted[region[:, 0], region[:, 1]].mean())
    if not overlaps:
        raise MetricError("PRO undefined: no ground-truth regions")
    return float(np.mean(overlaps))


def pro_curve(maps: Sequence[MapLike], masks: Sequence[np.ndarray]):
    """(fpr, pro) at every distinct score threshold, highest first, starting from (0, 0)."""
    scores, labels = pooled_pixels(maps, masks)
    n_neg = int((~labels).sum())
    if n_neg == 0:
        raise MetricError("PRO curve undefined: no normal pixels")

    # Each region pixel carries 1 / (|C_i| * n_regions) so cumulative sums give mean overlap.
    weights = []
    n_regions = 0
    for mask in masks:
        labelled, count = ndimage.label(np.asarray(mask).astype(bool), structure=EIGHT_CONNECTED)
        sizes = np.bincount(labelled.ravel(), minlength=count + 1).astype(np.float64)
        inv = np.zeros_like(sizes)
        inv[1:] = 1.0 / sizes[1:]
        weights.append(inv[labelled.ravel()])
        n_regions += count
    if n_regions == 0:
        raise MetricError("PRO undefined: no ground-truth regions")
    region_weight = np.concatenate(weights) / n_regions

    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    pro = np.cumsum(region_weight[order])
    fpr = np.cumsum(~labels[order]) / n_neg
    last_of_group = np.flatnonzero(np.r_[sorted_scores[1:] != sorted_scores[:-1], True])
    return np.r_[0.0, fpr[last_of_group]], np.r_[0.0, np.minimum(pro[last_of_group], 1.0)]


def aupro(maps: Sequence[MapLike], masks: Sequence[np.ndarray], fpr_limit: float = 0.3) -> float:
    """Area under PRO(fpr) on [0, fpr_limit] divided by fpr_limit; the end point is interpolated."""
    if not 0.0 < fpr_limit <= 1.0:
        raise ValueError(f"fpr_limit must be in (0, 1], got {fpr_limit}")
    fpr, pro = pro_curve(maps, masks)
    inside = fpr <= fpr_limit
    x, y = fpr[inside], pro[inside]
    if x[-1] < fpr_limit:
        nxt = int(np.argmax(~inside))
        y_end = np.interp(fpr_limit, [fpr[nxt - 1], fpr[nxt]], [pro[nxt - 1], pro[nxt]])
        x, y = np.r_[x, fpr_limit], np.r_[y, y_end]
    return float(auc(x, y) / fpr_limit)
