"""Scene directories: a NeRF-style camera manifest for references plus a query set.

Expected tree::

    scene/
      transforms.json          (or transforms_train.json)
      train/*.png              reference images named by the manifest
      queries.json             optional query manifest
      test/<defect>/*.png      query images when queries.json is absent
      ground_truth/<defect>/<stem>_mask.png
"""
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from hybrid_pad.core.errors import SceneFormatError
from hybrid_pad.core.types import CameraModel, Pose, QueryView, ReferenceView, SceneBundle
from hybrid_pad.core.utils.images import load_image, load_mask, save_image, save_mask

logger = logging.getLogger(__name__)

MANIFEST_NAMES = ("transforms.json", "transforms_train.json")
QUERY_MANIFEST = "queries.json"
CONVENTIONS = ("opencv", "opengl")
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")

QueryFailure = Tuple[str, str]


def _read_json(path: Path) -> Dict[str, Any]:
    try:
        return json.loads(path.read_text())
    except FileNotFoundError as e:
        raise SceneFormatError("Missing manifest", path) from e
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise SceneFormatError(f"Unparseable manifest ({e})", path) from e


def find_manifest(scene_dir: Path) -> Path:
    for name in MANIFEST_NAMES:
        if (scene_dir / name).exists():
            return scene_dir / name
    raise SceneFormatError(f"No camera manifest ({' or '.join(MANIFEST_NAMES)})", scene_dir)


def resolve_image_path(base: Path, file_path: str) -> Path:
    """Manifest paths may omit the extension."""
    path = (base / file_path).resolve()
    if path.suffix.lower() in IMAGE_SUFFIXES:
        return path
    for suffix in IMAGE_SUFFIXES:
        candidate = path.with_name(path.name + suffix)
        if candidate.exists():
            return candidate
    return path.with_name(path.name + ".png")


def pose_from_c2w(matrix: Any, convention: str, source: Path) -> Pose:
    """World -> camera pose from a 4x4 camera-to-world matrix."""
    try:
        c2w = np.asarray(matrix, dtype=np.float64)
    except (TypeError, ValueError) as e:
        raise SceneFormatError(f"Unparseable transform_matrix ({e})", source) from e
    if c2w.shape != (4, 4) or not np.all(np.isfinite(c2w)):
        raise SceneFormatError(f"transform_matrix must be a finite 4x4 matrix, got shape {c2w.shape}", source)
    if convention == "opengl":
        c2w = c2w.copy()
        c2w[:3, 1:3] *= -1.0
    R = c2w[:3, :3]
    if not np.allclose(R @ R.T, np.eye(3), atol=1e-4) or np.linalg.det(R) < 0:
        raise SceneFormatError("transform_matrix rotation is not orthonormal", source)
    return Pose.from_matrix(R.T, -R.T @ c2w[:3, 3])


def camera_from_manifest(manifest: Dict[str, Any], width: int, height: int, source: Path) -> CameraModel:
    """Explicit fl_x/fl_y/cx/cy win over the field-of-view angle (global, or shared by every frame that sets it)."""
    if "fl_x" in manifest:
        fx = float(manifest["fl_x"])
        fy = float(manifest.get("fl_y", fx))
        cx = float(manifest.get("cx", width / 2.0))
        cy = float(manifest.get("cy", height / 2.0))
        return CameraModel(fx, fy, cx, cy, width, height)
    fov = manifest.get("camera_angle_x")
    if fov is None:
        per_frame = {float(f["camera_angle_x"]) for f in manifest.get("frames") or [] if "camera_angle_x" in f}
        if len(per_frame) > 1:
            raise SceneFormatError(f"Frames disagree on camera_angle_x: {sorted(per_frame)}", source)
        fov = per_frame.pop() if per_frame else None
    if fov is None:
        raise SceneFormatError("Manifest has neither camera_angle_x nor fl_x", source)
    return CameraModel.from_fov(width, height, float(fov))


def _load_reference(args: Tuple[Path, Dict[str, Any], str, Path]) -> ReferenceView:
    base, frame, convention, manifest_path = args
    if "file_path" not in frame or "transform_matrix" not in frame:
        raise SceneFormatError("Frame without file_path or transform_matrix", manifest_path)
    path = resolve_image_path(base, frame["file_path"])
    pose = pose_from_c2w(frame["transform_matrix"], convention, manifest_path)
    return ReferenceView(path.stem, load_image(path), pose)


def load_references(
    scene_dir: Path, max_workers: Optional[int] = None
) -> Tuple[List[ReferenceView], CameraModel, Dict[str, Any]]:
    manifest_path = find_manifest(scene_dir)
    manifest = _read_json(manifest_path)
    convention = manifest.get("camera_convention", "opencv")
    if convention not in CONVENTIONS:
        raise SceneFormatError(f"Unknown camera_convention '{convention}'", manifest_path)
    frames = manifest.get("frames")
    if not isinstance(frames, list) or not frames:
        raise SceneFormatError("Manifest has no frames", manifest_path)

    jobs = [(scene_dir, frame, convention, manifest_path) for frame in frames]
    with ThreadPoolExecutor(max_workers=max_workers) as executor:
        references = list(executor.map(_load_reference, jobs))
    first = references[0].image
    camera = camera_from_manifest(manifest, first.width, first.height, manifest_path)
    logger.info(f"Loaded {len(references)} reference views from {manifest_path}")
    return references, camera, manifest


def _query_entries(query_dir: Path, convention: str) -> List[Dict[str, Any]]:
    """Normalized query descriptions from queries.json or the test/ground_truth tree."""
    manifest_path = query_dir / QUERY_MANIFEST
    if manifest_path.exists():
        manifest = _read_json(manifest_path)
        convention = manifest.get("camera_convention", convention)
        entries = []
        for frame in manifest.get("frames", []):
            if "file_path" not in frame:
                raise SceneFormatError("Query frame without file_path", manifest_path)
            path = resolve_image_path(query_dir, frame["file_path"])
            entries.append(
                {
                    "image_id": frame.get("image_id", path.stem),
                    "path": path,
                    "mask": resolve_image_path(query_dir, frame["mask_path"]) if frame.get("mask_path") else None,
                    "defect": frame.get("defect", "good"),
                    "pose": (
                        pose_from_c2w(frame["transform_matrix"], convention, manifest_path)
                        if "transform_matrix" in frame
                        else None
                    ),
                }
            )
        return entries

    test_dir = query_dir / "test"
    if not test_dir.is_dir():
        return []
    entries = []
    for defect_dir in sorted(p for p in test_dir.iterdir() if p.is_dir()):
        defect = defect_dir.name
        for path in sorted(p for p in defect_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES):
            mask = None if defect == "good" else query_dir / "ground_truth" / defect / f"{path.stem}_mask.png"
            entries.append(
                {"image_id": f"{defect}_{path.stem}", "path": path, "mask": mask, "defect": defect, "pose": None}
            )
    return entries


def _load_query(entry: Dict[str, Any]) -> QueryView:
    image = load_image(entry["path"])
    mask = None
    if entry["mask"] is not None:
        mask = load_mask(entry["mask"])
        if mask.shape != (image.height, image.width):
            raise SceneFormatError(
                f"Mask is {mask.shape[1]}x{mask.shape[0]} but image is {image.width}x{image.height}", entry["mask"]
            )
    return QueryView(entry["image_id"], image, mask=mask, pose=entry["pose"], defect=entry["defect"])


def _try_load_query(entry: Dict[str, Any]):
    try:
        return _load_query(entry), None
    except SceneFormatError as e:
        return None, str(e)


def load_query_set(
    query_dir: Path, strict: bool = True, convention: str = "opencv", max_workers: Optional[int] = None
) -> Tuple[List[QueryView], List[QueryFailure]]:
    """Queries plus (image_id, reason) for each query that could not be read when not strict."""
    entries = _query_entries(query_dir, convention)
    with ThreadPoolExecutor(max_workers=max_workers) as executor:
        if strict:
            return list(executor.map(_load_query, entries)), []
        results = list(executor.map(_try_load_query, entries))
    queries, failures = [], []
    for entry, (query, error) in zip(entries, results):
        if query is None:
            logger.warning(f"Skipping query {entry['image_id']}: {error}")
            failures.append((entry["image_id"], error))
        else:
            queries.append(query)
    return queries, failures


def load_mad_scene(scene_dir: Path, max_workers: Optional[int] = None) -> SceneBundle:
    scene_dir = Path(scene_dir)
    if not scene_dir.is_dir():
        raise SceneFormatError("Scene directory not found", scene_dir)
    references, camera, manifest = load_references(scene_dir, max_workers)
    queries, _ = load_query_set(scene_dir, True, manifest.get("camera_convention", "opencv"), max_workers)
    try:
        bundle = SceneBundle(manifest.get("object_id", scene_dir.name), camera, references, queries)
    except ValueError as e:
        raise SceneFormatError(str(e), scene_dir) from e
    logger.info(f"Scene '{bundle.object_id}': {len(references)} references, {len(queries)} queries")
    return bundle


def subsample_references(bundle: SceneBundle, fraction: float, seed: int = 0) -> SceneBundle:
    """Seeded uniform subset of round(fraction * n) references; nested across fractions for one seed."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    n = len(bundle.references)
    count = int(round(fraction * n))
    if count < 2:
        raise ValueError(f"fraction {fraction} of {n} references leaves {count} (< 2) views")
    if count == n:
        return bundle
    chosen = np.sort(np.random.default_rng(seed).permutation(n)[:count])
    references = [bundle.references[i] for i in chosen]
    return SceneBundle(bundle.object_id, bundle.camera, references, list(bundle.queries))


def reference_pairs(references: Sequence[ReferenceView]) -> List[Tuple]:
    """(image, pose) pairs as consumed by training."""
    return [(view.image, view.pose) for view in references]


def _c2w_matrix(pose: Pose) -> List[List[float]]:
    return pose.inverse().matrix.tolist()


def write_scene_directory(bundle: SceneBundle, out_dir: Path) -> Path:
    """Write a scene in the tree load_mad_scene reads (opencv convention, explicit intrinsics).

    Every query gets a mask file, all-zero for defect-free views, and keeps its pose when known.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cam = bundle.camera
    frames = []
    for view in bundle.references:
        rel = f"train/{view.image_id}.png"
        save_image(out_dir / rel, view.image)
        frames.append({"file_path": rel, "transform_matrix": _c2w_matrix(view.pose)})
    manifest = {
        "object_id": bundle.object_id,
        "camera_convention": "opencv",
        "camera_angle_x": cam.fov_x,
        "fl_x": cam.fx,
        "fl_y": cam.fy,
        "cx": cam.cx,
        "cy": cam.cy,
        "w": cam.width,
        "h": cam.height,
        "frames": frames,
    }
    (out_dir / MANIFEST_NAMES[0]).write_text(json.dumps(manifest, indent=2) + "\n")

    query_frames = []
    for query in bundle.queries:
        image_rel = f"test/{query.defect}/{query.image_id}.png"
        mask_rel = f"ground_truth/{query.defect}/{query.image_id}_mask.png"
        save_image(out_dir / image_rel, query.image)
        mask = query.mask if query.mask is not None else np.zeros((cam.height, cam.width), dtype=bool)
        save_mask(out_dir / mask_rel, mask)
        frame = {"image_id": query.image_id, "file_path": image_rel, "mask_path": mask_rel, "defect": query.defect}
        if query.pose is not None:
            frame["transform_matrix"] = _c2w_matrix(query.pose)
        query_frames.append(frame)
    if bundle.queries:
        queries = {"camera_convention": "opencv", "frames": query_frames}
        (out_dir / QUERY_MANIFEST).write_text(json.dumps(queries, indent=2) + "\n")
    logger.info(f"Wrote scene '{bundle.object_id}' to {out_dir}")
    return out_dir
