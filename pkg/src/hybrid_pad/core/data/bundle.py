"""Model bundle directory: everything inference needs, written atomically and verified on load.

Layout::

    model/
      manifest.json     format version, object id, camera, SH degrees, file hashes
      sparse.psfm       sparse model (points, tracks, reference poses and keypoints)
      retrieval.pdb     reference global descriptors
      gaussians.ply     trained Gaussian cloud
      config.txt        effective train / sfm / anomaly configuration (key = value)
"""
import json
import logging
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Union

from hybrid_pad.core.anomaly.anomaly_config import AnomalyConfig
from hybrid_pad.core.config import build_dataclass, dump_key_values, parse_key_values
from hybrid_pad.core.errors import BundleFormatError
from hybrid_pad.core.sfm.retrieval import (
    RetrievalDatabase,
    read_retrieval_database,
    write_retrieval_database,
)
from hybrid_pad.core.sfm.sfm_config import SfmConfig
from hybrid_pad.core.sfm.sparse_model import SparseModel, read_sparse_model, write_sparse_model
from hybrid_pad.core.splatting.gaussians import GaussianCloud
from hybrid_pad.core.splatting.ply import load_ply, save_ply
from hybrid_pad.core.splatting.train_config import TrainConfig
from hybrid_pad.core.types import CameraModel
from hybrid_pad.core.utils.cache import file_hash

logger = logging.getLogger(__name__)

BUNDLE_FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
BUNDLE_FILES = {
    "sparse": "sparse.psfm",
    "retrieval": "retrieval.pdb",
    "gaussians": "gaussians.ply",
    "config": "config.txt",
}


@dataclass(eq=False)
class ModelBundle:
    object_id: str
    camera: CameraModel
    sparse: SparseModel
    retrieval: RetrievalDatabase
    cloud: GaussianCloud
    train: TrainConfig = field(default_factory=TrainConfig)
    sfm: SfmConfig = field(default_factory=SfmConfig)
    anomaly: AnomalyConfig = field(default_factory=AnomalyConfig)


def _write_files(folder: Path, bundle: ModelBundle) -> Dict[str, str]:
    write_sparse_model(folder / BUNDLE_FILES["sparse"], bundle.sparse)
    write_retrieval_database(folder / BUNDLE_FILES["retrieval"], bundle.retrieval)
    save_ply(bundle.cloud.detach(), folder / BUNDLE_FILES["gaussians"])
    sections = {"train": bundle.train, "sfm": bundle.sfm, "anomaly": bundle.anomaly}
    (folder / BUNDLE_FILES["config"]).write_text(dump_key_values(sections))
    return {name: file_hash(folder / name) for name in BUNDLE_FILES.values()}


def save_bundle(out_dir: Union[str, Path], bundle: ModelBundle) -> Path:
    """Write into a sibling temp directory and swap it in; an interrupted save leaves no partial bundle."""
    out_dir = Path(out_dir)
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(prefix=f".{out_dir.name}.", dir=out_dir.parent))
    try:
        hashes = _write_files(staging, bundle)
        manifest = {
            "format_version": BUNDLE_FORMAT_VERSION,
            "object_id": bundle.object_id,
            "camera": bundle.camera.as_dict(),
            "sh_degree": bundle.cloud.sh_degree,
            "active_sh_degree": bundle.cloud.active_sh_degree,
            "n_gaussians": len(bundle.cloud),
            "n_points": len(bundle.sparse),
            "n_references": len(bundle.retrieval),
            "files": hashes,
        }
        (staging / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        if out_dir.exists():
            shutil.rmtree(out_dir)
        os.replace(staging, out_dir)
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    logger.info(
        f"Saved bundle '{bundle.object_id}' to {out_dir} "
        f"({len(bundle.cloud)} Gaussians, {len(bundle.sparse)} sparse points)"
    )
    return out_dir


def read_manifest(model_dir: Path) -> Dict[str, Any]:
    path = model_dir / MANIFEST_NAME
    if not path.exists():
        raise BundleFormatError("Bundle manifest not found", path)
    try:
        manifest = json.loads(path.read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise BundleFormatError(f"Unparseable bundle manifest ({e})", path) from e
    version = manifest.get("format_version")
    if version != BUNDLE_FORMAT_VERSION:
        raise BundleFormatError(
            f"Incompatible bundle format version {version} (this build reads {BUNDLE_FORMAT_VERSION})", path
        )
    return manifest


def verify_bundle(model_dir: Path, manifest: Dict[str, Any]) -> None:
    """Every bundle file must exist and match the hash recorded at save time."""
    recorded = manifest.get("files", {})
    for name in BUNDLE_FILES.values():
        path = model_dir / name
        if not path.exists():
            raise BundleFormatError("Bundle file missing", path)
        if name not in recorded:
            raise BundleFormatError("Bundle file has no recorded hash", path)
        if file_hash(path) != recorded[name]:
            raise BundleFormatError("Bundle file is truncated or modified (hash mismatch)", path)


def _read_configs(path: Path) -> Dict[str, Any]:
    raw = parse_key_values(path.read_text())
    return {
        "train": build_dataclass(TrainConfig, raw.get("train", {}), "train"),
        "sfm": build_dataclass(SfmConfig, raw.get("sfm", {}), "sfm"),
        "anomaly": build_dataclass(AnomalyConfig, raw.get("anomaly", {}), "anomaly"),
    }


def load_bundle(model_dir: Union[str, Path]) -> ModelBundle:
    model_dir = Path(model_dir)
    if not model_dir.is_dir():
        raise BundleFormatError("Bundle directory not found", model_dir)
    manifest = read_manifest(model_dir)
    verify_bundle(model_dir, manifest)
    try:
        camera = CameraModel(**manifest["camera"])
    except (KeyError, TypeError, ValueError) as e:
        raise BundleFormatError(f"Invalid camera in manifest ({e})", model_dir / MANIFEST_NAME) from e

    sparse = read_sparse_model(model_dir / BUNDLE_FILES["sparse"])
    retrieval = read_retrieval_database(model_dir / BUNDLE_FILES["retrieval"])
    cloud = load_ply(
        model_dir / BUNDLE_FILES["gaussians"],
        sh_degree=int(manifest.get("sh_degree", 3)),
        active_sh_degree=int(manifest.get("active_sh_degree", 3)),
    )
    configs = _read_configs(model_dir / BUNDLE_FILES["config"])
    logger.info(f"Loaded bundle '{manifest.get('object_id')}' from {model_dir}")
    return ModelBundle(manifest.get("object_id", model_dir.name), camera, sparse, retrieval, cloud, **configs)
