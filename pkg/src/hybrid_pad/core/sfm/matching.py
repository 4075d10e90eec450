"""Mutual nearest-neighbour descriptor matching with a two-sided ratio test."""
import logging
from dataclasses import dataclass

import numpy as np

from hybrid_pad.core.sfm.features import KeypointSet

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class MatchSet:
    """pairs: (M, 2) int64 (index in A, index in B); scores: (M,) cosine similarities."""

    pairs: np.ndarray
    scores: np.ndarray

    @classmethod
    def empty(cls) -> "MatchSet":
        return cls(np.zeros((0, 2), dtype=np.int64), np.zeros(0))

    def __len__(self) -> int:
        return len(self.pairs)

    def transposed(self) -> "MatchSet":
        order = np.argsort(self.pairs[:, 1], kind="stable")
        return MatchSet(self.pairs[order][:, ::-1].copy(), self.scores[order])

    def subset(self, keep: np.ndarray) -> "MatchSet":
        return MatchSet(self.pairs[keep], self.scores[keep])


def _passes_ratio(dist: np.ndarray, ratio: float) -> tuple:
    """Row-wise nearest neighbour and whether it beats the second best by `ratio`."""
    nn = np.argmin(dist, axis=1)
    if dist.shape[1] < 2:
        return nn, np.ones(len(nn), dtype=bool)
    two = np.partition(dist, 1, axis=1)[:, :2]
    return nn, two[:, 0] < ratio * two[:, 1]


def _match(a: KeypointSet, b: KeypointSet, ratio: float) -> MatchSet:
    sim = a.descriptors.astype(np.float64) @ b.descriptors.astype(np.float64).T
    dist = np.sqrt(np.maximum(2.0 - 2.0 * sim, 0.0))
    nn_ab, ok_ab = _passes_ratio(dist, ratio)
    nn_ba, ok_ba = _passes_ratio(dist.T, ratio)
    idx_a = np.arange(len(a))
    mutual = nn_ba[nn_ab] == idx_a
    keep = mutual & ok_ab & ok_ba[nn_ab]
    pairs = np.column_stack([idx_a[keep], nn_ab[keep]]).astype(np.int64)
    return MatchSet(pairs, sim[idx_a[keep], nn_ab[keep]])


def match_features(a: KeypointSet, b: KeypointSet, ratio: float = 0.85) -> MatchSet:
    """One-to-one matches that are mutual nearest neighbours and pass the ratio test both ways."""
    if len(a) == 0 or len(b) == 0:
        return MatchSet.empty()
    # canonical argument order keeps match(a, b) an exact transpose of match(b, a)
    key_a = (len(a), a.descriptors.tobytes(), a.keypoints.tobytes())
    key_b = (len(b), b.descriptors.tobytes(), b.keypoints.tobytes())
    if key_a > key_b:
        return _match(b, a, ratio).transposed()
    return _match(a, b, ratio)
