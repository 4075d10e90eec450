"""Reference sparse model from posed images: pair matching, DLT triangulation, tracks, refinement."""
import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage
from scipy.cluster.hierarchy import DisjointSet
from scipy.optimize import least_squares
from scipy.sparse import coo_matrix

from hybrid_pad.core.errors import ReconstructionError
from hybrid_pad.core.geometry.camera import project_points
from hybrid_pad.core.sfm.features import KeypointSet, extract_keypoints
from hybrid_pad.core.sfm.matching import match_features
from hybrid_pad.core.sfm.retrieval import RetrievalDatabase, compute_global_descriptor, retrieve_top_k
from hybrid_pad.core.sfm.sfm_config import SfmConfig
from hybrid_pad.core.sfm.sparse_model import SparseModel
from hybrid_pad.core.types import CameraModel, ImageBuffer, Pose, ReferenceView

logger = logging.getLogger(__name__)

_MAX_SPLIT_SEEDS = 20


@dataclass
class PairObservations:
    """Keypoint indices in images i and j that triangulated consistently."""

    i: int
    j: int
    kp_i: np.ndarray
    kp_j: np.ndarray


def _skew(t: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -t[2], t[1]], [t[2], 0.0, -t[0]], [-t[1], t[0], 0.0]])


def fundamental_from_poses(pose_a: Pose, pose_b: Pose, cam: CameraModel) -> np.ndarray:
    """F with x_b^T F x_a = 0 for pixel coordinates of the same world point."""
    R = pose_b.rotation @ pose_a.rotation.T
    t = pose_b.translation - R @ pose_a.translation
    K_inv = np.linalg.inv(cam.K)
    return K_inv.T @ _skew(t) @ R @ K_inv


def epipolar_distances(F: np.ndarray, uv_a: np.ndarray, uv_b: np.ndarray) -> np.ndarray:
    """Larger of the two point-to-epipolar-line distances, in pixels."""
    xa = np.column_stack([uv_a, np.ones(len(uv_a))])
    xb = np.column_stack([uv_b, np.ones(len(uv_b))])
    lines_b = xa @ F.T
    lines_a = xb @ F
    algebraic = np.abs(np.sum(xb * lines_b, axis=1))
    d_b = algebraic / np.maximum(np.hypot(lines_b[:, 0], lines_b[:, 1]), 1e-12)
    d_a = algebraic / np.maximum(np.hypot(lines_a[:, 0], lines_a[:, 1]), 1e-12)
    return np.maximum(d_a, d_b)


def _normalized(uv: np.ndarray, cam: CameraModel) -> np.ndarray:
    return np.column_stack([(uv[:, 0] - cam.cx) / cam.fx, (uv[:, 1] - cam.cy) / cam.fy])


def _dehomogenize(X: np.ndarray) -> np.ndarray:
    w = X[..., 3:]
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(np.abs(w) > 1e-12, X[..., :3] / w, np.nan)


def triangulate_pair_dlt(
    uv_a: np.ndarray, uv_b: np.ndarray, pose_a: Pose, pose_b: Pose, cam: CameraModel
) -> np.ndarray:
    """Batched two-view linear triangulation in normalized camera coordinates -> (N, 3)."""
    xa, xb = _normalized(np.asarray(uv_a, float), cam), _normalized(np.asarray(uv_b, float), cam)
    Pa = np.hstack([pose_a.rotation, pose_a.translation[:, None]])
    Pb = np.hstack([pose_b.rotation, pose_b.translation[:, None]])
    A = np.stack(
        [
            xa[:, :1] * Pa[2] - Pa[0],
            xa[:, 1:] * Pa[2] - Pa[1],
            xb[:, :1] * Pb[2] - Pb[0],
            xb[:, 1:] * Pb[2] - Pb[1],
        ],
        axis=1,
    )
    _, _, vt = np.linalg.svd(A)
    return _dehomogenize(vt[:, -1, :])


def triangulate_track_dlt(uv: np.ndarray, poses: Sequence[Pose], cam: CameraModel) -> np.ndarray:
    """Linear triangulation of one point seen in several views."""
    x = _normalized(np.asarray(uv, float), cam)
    rows = []
    for (xn, yn), pose in zip(x, poses):
        P = np.hstack([pose.rotation, pose.translation[:, None]])
        rows.append(xn * P[2] - P[0])
        rows.append(yn * P[2] - P[1])
    _, _, vt = np.linalg.svd(np.array(rows))
    return _dehomogenize(vt[-1])


def triangulation_angles_deg(X: np.ndarray, center_a: np.ndarray, center_b: np.ndarray) -> np.ndarray:
    ra = X - center_a
    rb = X - center_b
    cos = np.sum(ra * rb, axis=1) / np.maximum(
        np.linalg.norm(ra, axis=1) * np.linalg.norm(rb, axis=1), 1e-12
    )
    return np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))


def _reprojection(X: np.ndarray, uv: np.ndarray, pose: Pose, cam: CameraModel) -> Tuple[np.ndarray, np.ndarray]:
    projected, depth = project_points(X, pose, cam)
    err = np.linalg.norm(projected - uv, axis=1)
    return np.where(depth > 0, err, np.inf), depth


def select_reference_pairs(db: RetrievalDatabase, k: int) -> List[Tuple[int, int]]:
    """Unordered index pairs (i < j) linking every reference to its k most similar references."""
    ids = db.ids
    index = {image_id: i for i, image_id in enumerate(ids)}
    pairs = set()
    for i, image_id in enumerate(ids):
        neighbours = retrieve_top_k(db.descriptor(image_id), db, min(k + 1, len(db)))
        for other in neighbours:
            j = index[other]
            if j != i:
                pairs.add((min(i, j), max(i, j)))
    return sorted(pairs)


def triangulate_pair(
    i: int,
    j: int,
    kp_i: KeypointSet,
    kp_j: KeypointSet,
    pose_i: Pose,
    pose_j: Pose,
    cam: CameraModel,
    cfg: SfmConfig,
) -> Optional[PairObservations]:
    """Matches between two references that pass the epipolar, depth, reprojection and angle checks."""
    baseline = np.linalg.norm(pose_i.center - pose_j.center)
    if baseline < cfg.min_baseline:
        logger.warning(f"Skipping degenerate pair ({i}, {j}): baseline {baseline:.2e}")
        return None
    matches = match_features(kp_i, kp_j, cfg.ratio_threshold)
    if len(matches) == 0:
        return None
    uv_i = kp_i.uv[matches.pairs[:, 0]]
    uv_j = kp_j.uv[matches.pairs[:, 1]]
    F = fundamental_from_poses(pose_i, pose_j, cam)
    keep = epipolar_distances(F, uv_i, uv_j) <= cfg.epipolar_threshold

    X = triangulate_pair_dlt(uv_i, uv_j, pose_i, pose_j, cam)
    err_i, _ = _reprojection(X, uv_i, pose_i, cam)
    err_j, _ = _reprojection(X, uv_j, pose_j, cam)
    with np.errstate(invalid="ignore"):
        keep &= np.all(np.isfinite(X), axis=1)
        keep &= (err_i <= cfg.reprojection_threshold) & (err_j <= cfg.reprojection_threshold)
        keep &= triangulation_angles_deg(X, pose_i.center, pose_j.center) >= cfg.min_triangulation_angle_deg
    logger.debug(f"Pair ({i}, {j}): {len(matches)} matches, {int(keep.sum())} triangulated")
    return PairObservations(i, j, matches.pairs[keep, 0], matches.pairs[keep, 1])


def build_tracks(pairs: Sequence[PairObservations]) -> List[np.ndarray]:
    """Transitive closure of pairwise observations; each track is sorted (image, keypoint) rows."""
    ds = DisjointSet()
    for obs in pairs:
        for a, b in zip(obs.kp_i, obs.kp_j):
            node_a, node_b = (obs.i, int(a)), (obs.j, int(b))
            ds.add(node_a)
            ds.add(node_b)
            ds.merge(node_a, node_b)
    tracks = [np.array(sorted(subset), dtype=np.int64) for subset in ds.subsets() if len(subset) >= 2]
    tracks.sort(key=lambda t: (t[0, 0], t[0, 1]))
    return tracks


class _TrackResolver:
    """Turns raw tracks into consistent (track, point) pairs, splitting inconsistent ones."""

    def __init__(self, poses: Sequence[Pose], keypoints: Sequence[KeypointSet], cam: CameraModel, cfg: SfmConfig):
        self.poses = poses
        self.keypoints = keypoints
        self.cam = cam
        self.cfg = cfg

    def _uv(self, track: np.ndarray) -> np.ndarray:
        return np.array([self.keypoints[img].uv[kp] for img, kp in track])

    def _errors(self, X: np.ndarray, track: np.ndarray) -> np.ndarray:
        uv = self._uv(track)
        errs = np.empty(len(track))
        for n, (img, _) in enumerate(track):
            errs[n] = _reprojection(X[None], uv[n : n + 1], self.poses[img], self.cam)[0][0]
        return errs

    def _max_angle(self, X: np.ndarray, track: np.ndarray) -> float:
        centers = np.array([self.poses[img].center for img in track[:, 0]])
        rays = X - centers
        rays /= np.linalg.norm(rays, axis=1, keepdims=True)
        cos = np.clip(rays @ rays.T, -1.0, 1.0)
        return float(np.degrees(np.arccos(cos.min())))

    def consistent(self, X: np.ndarray, track: np.ndarray) -> bool:
        if not np.all(np.isfinite(X)):
            return False
        if np.any(self._errors(X, track) > self.cfg.reprojection_threshold):
            return False
        return self._max_angle(X, track) >= self.cfg.min_triangulation_angle_deg

    def triangulate(self, track: np.ndarray) -> np.ndarray:
        return triangulate_track_dlt(self._uv(track), [self.poses[i] for i in track[:, 0]], self.cam)

    def resolve(self, track: np.ndarray) -> List[Tuple[np.ndarray, np.ndarray]]:
        if len(np.unique(track[:, 0])) == len(track):
            X = self.triangulate(track)
            if self.consistent(X, track):
                return [(track, X)]
        return self._split(track)

    def _split(self, track: np.ndarray) -> List[Tuple[np.ndarray, np.ndarray]]:
        resolved = []
        remaining = track
        while len(np.unique(remaining[:, 0])) >= 2:
            best = None
            seeds = [
                (a, b)
                for a, b in itertools.combinations(range(len(remaining)), 2)
                if remaining[a, 0] != remaining[b, 0]
            ][:_MAX_SPLIT_SEEDS]
            for a, b in seeds:
                X = self.triangulate(remaining[[a, b]])
                if not np.all(np.isfinite(X)):
                    continue
                errs = self._errors(X, remaining)
                inliers = self._best_per_image(remaining, errs)
                if best is None or len(inliers) > len(best):
                    best = inliers
            if best is None or len(best) < 2:
                break
            candidate = remaining[best]
            X = self.triangulate(candidate)
            if self.consistent(X, candidate):
                resolved.append((candidate, X))
            remaining = np.delete(remaining, best, axis=0)
        return resolved

    def _best_per_image(self, track: np.ndarray, errs: np.ndarray) -> np.ndarray:
        """Indices of inlier observations, at most one (the lowest-error) per image."""
        chosen = {}
        for n, (img, _) in enumerate(track):
            if errs[n] <= self.cfg.reprojection_threshold and (img not in chosen or errs[n] < errs[chosen[img]]):
                chosen[img] = n
        return np.array(sorted(chosen.values()), dtype=np.int64)


def refine_points(
    xyz: np.ndarray,
    tracks: Sequence[np.ndarray],
    poses: Sequence[Pose],
    keypoints: Sequence[KeypointSet],
    cam: CameraModel,
) -> np.ndarray:
    """Minimize total squared reprojection error over all points with reference poses held fixed."""
    if len(xyz) == 0:
        return xyz
    point_idx = np.concatenate([np.full(len(t), p) for p, t in enumerate(tracks)])
    image_idx = np.concatenate([t[:, 0] for t in tracks])
    observed = np.concatenate([[keypoints[img].uv[kp] for img, kp in t] for t in tracks])
    R = np.stack([poses[i].rotation for i in image_idx])
    t = np.stack([poses[i].translation for i in image_idx])

    def residuals(x: np.ndarray) -> np.ndarray:
        X = x.reshape(-1, 3)[point_idx]
        pc = np.einsum("nij,nj->ni", R, X) + t
        z = np.where(np.abs(pc[:, 2]) > 1e-9, pc[:, 2], 1e-9)
        u = cam.fx * pc[:, 0] / z + cam.cx
        v = cam.fy * pc[:, 1] / z + cam.cy
        return (np.column_stack([u, v]) - observed).ravel()

    n_obs = len(point_idx)
    rows = np.repeat(np.arange(2 * n_obs), 3)
    cols = (np.repeat(point_idx, 2)[:, None] * 3 + np.arange(3)).ravel()
    sparsity = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(2 * n_obs, 3 * len(xyz)))
    result = least_squares(
        residuals,
        xyz.ravel(),
        jac_sparsity=sparsity.tocsr(),
        method="trf",
        x_scale="jac",
        ftol=1e-10,
        xtol=1e-12,
        max_nfev=50,
    )
    logger.debug(f"Point refinement: cost {result.cost:.4g} after {result.nfev} evaluations")
    return result.x.reshape(-1, 3)


def _sample_colors(images: Sequence[ImageBuffer], tracks: Sequence[np.ndarray], keypoints) -> np.ndarray:
    """Mean bilinear RGB over every observation of each point."""
    sums = np.zeros((len(tracks), 3))
    point_idx = np.concatenate([np.full(len(t), p) for p, t in enumerate(tracks)])
    obs = np.concatenate(tracks)
    for img in np.unique(obs[:, 0]):
        sel = obs[:, 0] == img
        uv = keypoints[img].uv[obs[sel, 1]]
        rgb = images[img].rgb()
        for c in range(3):
            values = ndimage.map_coordinates(rgb[:, :, c], [uv[:, 1], uv[:, 0]], order=1, mode="nearest")
            np.add.at(sums[:, c], point_idx[sel], values)
    colors = sums / np.array([len(t) for t in tracks])[:, None]
    return np.round(np.clip(colors, 0.0, 1.0) * 255.0).astype(np.uint8)


def _mean_descriptors(tracks: Sequence[np.ndarray], keypoints: Sequence[KeypointSet]) -> np.ndarray:
    dim = keypoints[0].descriptors.shape[1] if keypoints else 128
    out = np.empty((len(tracks), dim), dtype=np.float32)
    for p, track in enumerate(tracks):
        mean = np.mean([keypoints[img].descriptors[kp].astype(np.float64) for img, kp in track], axis=0)
        out[p] = mean / max(np.linalg.norm(mean), 1e-12)
    return out


def build_sparse_model(
    image_ids: List[str],
    poses: List[Pose],
    keypoints: List[KeypointSet],
    pairs: Sequence[PairObservations],
    cam: CameraModel,
    cfg: SfmConfig,
    images: Optional[Sequence[ImageBuffer]] = None,
) -> SparseModel:
    """Merge pairwise observations into tracks, triangulate, refine and filter."""
    raw_tracks = build_tracks(pairs)
    resolver = _TrackResolver(poses, keypoints, cam, cfg)
    resolved = [item for track in raw_tracks for item in resolver.resolve(track)]
    n_split = len(resolved) - len(raw_tracks)
    logger.info(f"{len(raw_tracks)} raw tracks -> {len(resolved)} consistent tracks ({n_split:+d} from splits)")
    if not resolved:
        return SparseModel.empty(image_ids, poses, keypoints)

    tracks = [track for track, _ in resolved]
    xyz = refine_points(np.array([X for _, X in resolved]), tracks, poses, keypoints, cam)

    keep = [resolver.consistent(X, track) for X, track in zip(xyz, tracks)]
    tracks = [track for track, k in zip(tracks, keep) if k]
    xyz = xyz[np.array(keep, dtype=bool)]
    dropped = len(keep) - len(tracks)
    if dropped:
        logger.info(f"Dropped {dropped} points exceeding {cfg.reprojection_threshold} px after refinement")
    if not tracks:
        return SparseModel.empty(image_ids, poses, keypoints)

    if images is not None:
        rgb = _sample_colors(images, tracks, keypoints)
    else:
        rgb = np.full((len(tracks), 3), 128, dtype=np.uint8)
    return SparseModel(xyz, rgb, tracks, _mean_descriptors(tracks, keypoints), image_ids, poses, keypoints)


def triangulate_reference_model(
    refs: Sequence[ReferenceView],
    cam: CameraModel,
    db: Optional[RetrievalDatabase] = None,
    cfg: Optional[SfmConfig] = None,
    max_workers: Optional[int] = None,
) -> SparseModel:
    """Build the sparse model; `db`, when given and empty, is filled with the reference descriptors."""
    cfg = cfg or SfmConfig()
    if len(refs) < 2:
        raise ReconstructionError(f"At least 2 reference views are required, got {len(refs)}")
    db = db if db is not None else RetrievalDatabase()
    image_ids = [ref.image_id for ref in refs]
    poses = [ref.pose for ref in refs]
    images = [ref.image for ref in refs]

    with ThreadPoolExecutor(max_workers=max_workers) as executor:
        keypoints = list(executor.map(lambda r: extract_keypoints(r.image_id, r.image, cfg), refs))
        if len(db) == 0:
            descriptors = list(
                executor.map(
                    lambda img: compute_global_descriptor(img, cfg.descriptor_grid, cfg.orientation_bins), images
                )
            )
            for image_id, descriptor in zip(image_ids, descriptors):
                db.add(image_id, descriptor)
        elif db.ids != image_ids:
            raise ReconstructionError("Retrieval database does not match the reference set")
        logger.info(f"Extracted {sum(len(k) for k in keypoints)} keypoints from {len(refs)} references")

        index_pairs = select_reference_pairs(db, cfg.pair_retrieval_k)
        pair_results = list(
            executor.map(
                lambda ij: triangulate_pair(
                    ij[0], ij[1], keypoints[ij[0]], keypoints[ij[1]], poses[ij[0]], poses[ij[1]], cam, cfg
                ),
                index_pairs,
            )
        )
    pairs = [p for p in pair_results if p is not None and len(p.kp_i) > 0]
    logger.info(f"{len(pairs)} of {len(index_pairs)} reference pairs produced triangulated matches")

    model = build_sparse_model(image_ids, poses, keypoints, pairs, cam, cfg, images)
    if len(model) == 0:
        raise ReconstructionError(f"Sparse reconstruction produced no points from {len(refs)} references")
    logger.info(
        f"Triangulated {len(model)} points, mean reprojection error {model.mean_reprojection_error(cam):.3f} px"
    )
    return model
