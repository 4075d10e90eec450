"""Localize an unposed query image against the sparse reference model."""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from hybrid_pad.core.errors import LocalizationError
from hybrid_pad.core.sfm.features import KeypointSet, detect_and_describe, extract_keypoints
from hybrid_pad.core.sfm.matching import match_features
from hybrid_pad.core.sfm.pnp import MIN_CORRESPONDENCES, solve_pnp_ransac
from hybrid_pad.core.sfm.retrieval import RetrievalDatabase, compute_global_descriptor, retrieve_top_k
from hybrid_pad.core.sfm.sfm_config import SfmConfig
from hybrid_pad.core.sfm.sparse_model import SparseModel
from hybrid_pad.core.types import CameraModel, ImageBuffer, Pose

logger = logging.getLogger(__name__)


@dataclass
class LocalizationResult:
    pose: Pose
    retrieved: List[str]
    n_matches: int
    n_correspondences: int
    inliers: np.ndarray = field(repr=False)


def lift_matches(
    query_kps: KeypointSet, model: SparseModel, retrieved: List[str], ratio: float
) -> Tuple[np.ndarray, np.ndarray, int]:
    """2D-3D correspondences from query-to-reference matches whose reference keypoint has a track.

    A query keypoint voting for several points keeps the most voted one (ties: highest similarity).
    Returns (query keypoint indices, point indices, raw match count).
    """
    votes: Dict[Tuple[int, int], List[float]] = {}
    n_matches = 0
    for image_id in retrieved:
        matches = match_features(query_kps, model.keypoints[model.image_index(image_id)], ratio)
        n_matches += len(matches)
        lookup = model.point_lookup(image_id)
        for (qi, ri), score in zip(matches.pairs, matches.scores):
            point = lookup[ri]
            if point >= 0:
                entry = votes.setdefault((int(qi), int(point)), [0.0, -np.inf])
                entry[0] += 1.0
                entry[1] = max(entry[1], float(score))

    best: Dict[int, Tuple[float, float, int]] = {}
    for (qi, point), (count, score) in sorted(votes.items()):
        candidate = (count, score, -point)
        if qi not in best or candidate > best[qi]:
            best[qi] = candidate
    query_idx = np.array(sorted(best), dtype=np.int64)
    point_idx = np.array([-best[qi][2] for qi in query_idx], dtype=np.int64)
    return query_idx, point_idx, n_matches


def localize_query_detailed(
    img: ImageBuffer,
    model: SparseModel,
    db: RetrievalDatabase,
    cam: CameraModel,
    cfg: Optional[SfmConfig] = None,
    seed: int = 0,
    image_id: Optional[str] = None,
) -> LocalizationResult:
    """With `image_id`, query keypoints come from the sidecar for that id when one exists."""
    cfg = cfg or SfmConfig()
    if len(model) == 0:
        raise LocalizationError("sparse model is empty")
    descriptor = compute_global_descriptor(img, cfg.descriptor_grid, cfg.orientation_bins)
    retrieved = retrieve_top_k(descriptor, db, min(cfg.retrieval_k, len(db)))
    query_kps = extract_keypoints(image_id, img, cfg) if image_id else detect_and_describe(img, cfg)
    query_idx, point_idx, n_matches = lift_matches(query_kps, model, retrieved, cfg.ratio_threshold)
    if len(query_idx) < MIN_CORRESPONDENCES:
        raise LocalizationError("too few matches", n_matches=len(query_idx))

    result = solve_pnp_ransac(query_kps.uv[query_idx], model.xyz[point_idx], cam, cfg, seed=seed)
    if len(result.inliers) < cfg.min_query_inliers:
        raise LocalizationError("too few inliers", n_matches=len(query_idx), n_inliers=len(result.inliers))
    logger.debug(
        f"Localized with {len(result.inliers)}/{len(query_idx)} inliers "
        f"({n_matches} raw matches over {len(retrieved)} references)"
    )
    return LocalizationResult(result.pose, retrieved, n_matches, len(query_idx), result.inliers)


def localize_query(
    img: ImageBuffer,
    model: SparseModel,
    db: RetrievalDatabase,
    cam: CameraModel,
    cfg: Optional[SfmConfig] = None,
    seed: int = 0,
    image_id: Optional[str] = None,
) -> Pose:
    """Query pose from retrieval, matching, track lifting and PnP-RANSAC."""
    return localize_query_detailed(img, model, db, cam, cfg, seed, image_id).pose
