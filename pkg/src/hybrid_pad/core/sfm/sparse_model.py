"""Sparse reference model and its binary serialization."""
import io
import logging
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Dict, List

import numpy as np

from hybrid_pad.core.errors import BundleFormatError
from hybrid_pad.core.geometry.camera import project_points
from hybrid_pad.core.sfm.features import DESCRIPTOR_DIM, KeypointSet
from hybrid_pad.core.types import CameraModel, Pose

logger = logging.getLogger(__name__)

MAGIC = b"PSFM"
VERSION = 1


@dataclass(frozen=True, eq=False)
class SparseModel:
    """Triangulated points with tracks into the reference keypoints they were built from.

    tracks[i] is an (n, 2) int64 array of (image index, keypoint index) rows.
    """

    xyz: np.ndarray
    rgb: np.ndarray
    tracks: List[np.ndarray]
    descriptors: np.ndarray
    image_ids: List[str]
    poses: List[Pose]
    keypoints: List[KeypointSet]
    _index: Dict[str, int] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if not (len(self.xyz) == len(self.rgb) == len(self.tracks) == len(self.descriptors)):
            raise ValueError("Per-point arrays have different lengths")
        if not (len(self.image_ids) == len(self.poses) == len(self.keypoints)):
            raise ValueError("Per-image lists have different lengths")
        object.__setattr__(self, "_index", {image_id: i for i, image_id in enumerate(self.image_ids)})

    @classmethod
    def empty(cls, image_ids: List[str], poses: List[Pose], keypoints: List[KeypointSet]) -> "SparseModel":
        return cls(
            np.zeros((0, 3)),
            np.zeros((0, 3), dtype=np.uint8),
            [],
            np.zeros((0, DESCRIPTOR_DIM), dtype=np.float32),
            image_ids,
            poses,
            keypoints,
        )

    def __len__(self) -> int:
        return len(self.xyz)

    def image_index(self, image_id: str) -> int:
        return self._index[image_id]

    @cached_property
    def _kp_to_point(self) -> List[np.ndarray]:
        lookup = [np.full(len(kps), -1, dtype=np.int64) for kps in self.keypoints]
        for point, track in enumerate(self.tracks):
            for image, kp in track:
                lookup[image][kp] = point
        return lookup

    def point_lookup(self, image_id: str) -> np.ndarray:
        """Keypoint index -> point index (-1 where the keypoint is not part of a track)."""
        return self._kp_to_point[self._index[image_id]]

    def reprojection_errors(self, cam: CameraModel) -> List[np.ndarray]:
        """Per point, the pixel error in every image of its track (inf when behind the camera)."""
        errors = []
        for point, track in enumerate(self.tracks):
            errs = np.empty(len(track))
            for j, (image, kp) in enumerate(track):
                uv, depth = project_points(self.xyz[point], self.poses[image], cam)
                observed = self.keypoints[image].uv[kp]
                errs[j] = np.linalg.norm(uv[0] - observed) if depth[0] > 0 else np.inf
            errors.append(errs)
        return errors

    def mean_reprojection_error(self, cam: CameraModel) -> float:
        errors = self.reprojection_errors(cam)
        return float(np.mean(np.concatenate(errors))) if errors else 0.0

    def equals(self, other: "SparseModel") -> bool:
        return (
            np.array_equal(self.xyz, other.xyz)
            and np.array_equal(self.rgb, other.rgb)
            and len(self.tracks) == len(other.tracks)
            and all(np.array_equal(a, b) for a, b in zip(self.tracks, other.tracks))
            and np.array_equal(self.descriptors, other.descriptors)
            and self.image_ids == other.image_ids
            and all(
                np.array_equal(a.quaternion, b.quaternion) and np.array_equal(a.translation, b.translation)
                for a, b in zip(self.poses, other.poses)
            )
            and all(a.equals(b) for a, b in zip(self.keypoints, other.keypoints))
        )


def write_sparse_model(path: Path, model: SparseModel) -> None:
    """Binary layout documented in docs/formats.md."""
    dim = model.descriptors.shape[1]
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IIII", VERSION, len(model), len(model.image_ids), dim))
    for xyz, rgb, track, desc in zip(model.xyz, model.rgb, model.tracks, model.descriptors):
        buf.write(xyz.astype("<f8").tobytes())
        buf.write(rgb.astype(np.uint8).tobytes())
        buf.write(struct.pack("<I", len(track)))
        buf.write(track.astype("<u4").tobytes())
        buf.write(desc.astype("<f4").tobytes())
    for image_id, pose, kps in zip(model.image_ids, model.poses, model.keypoints):
        name = image_id.encode("utf-8")
        buf.write(struct.pack("<H", len(name)))
        buf.write(name)
        buf.write(pose.quaternion.astype("<f8").tobytes())
        buf.write(pose.translation.astype("<f8").tobytes())
        buf.write(struct.pack("<II", len(kps), kps.descriptors.shape[1]))
        buf.write(kps.keypoints.astype("<f8").tobytes())
        buf.write(kps.descriptors.astype("<f4").tobytes())
    path.write_bytes(buf.getvalue())


class ByteReader:
    """Cursor over a byte string that reports truncation against the file path."""

    def __init__(self, data: bytes, path: Path):
        self.data = data
        self.path = path
        self.offset = 0

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.data):
            raise BundleFormatError("Truncated file", self.path)
        chunk = self.data[self.offset : self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype: str, count: int) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).copy()


def read_sparse_model(path: Path) -> SparseModel:
    reader = ByteReader(path.read_bytes(), path)
    if reader.take(4) != MAGIC:
        raise BundleFormatError("Not a sparse model file", path)
    version, n_points, n_images, dim = reader.unpack("<IIII")
    if version != VERSION:
        raise BundleFormatError(f"Unsupported sparse model version {version}", path)

    xyz = np.empty((n_points, 3))
    rgb = np.empty((n_points, 3), dtype=np.uint8)
    descriptors = np.empty((n_points, dim), dtype=np.float32)
    tracks = []
    for i in range(n_points):
        xyz[i] = reader.array("<f8", 3)
        rgb[i] = reader.array("u1", 3)
        (length,) = reader.unpack("<I")
        tracks.append(reader.array("<u4", 2 * length).reshape(length, 2).astype(np.int64))
        descriptors[i] = reader.array("<f4", dim)

    image_ids, poses, keypoints = [], [], []
    for _ in range(n_images):
        (name_len,) = reader.unpack("<H")
        image_ids.append(reader.take(name_len).decode("utf-8"))
        quaternion = reader.array("<f8", 4)
        translation = reader.array("<f8", 3)
        poses.append(Pose(quaternion, translation))
        n_kp, kp_dim = reader.unpack("<II")
        kps = reader.array("<f8", 4 * n_kp).reshape(n_kp, 4)
        desc = reader.array("<f4", kp_dim * n_kp).reshape(n_kp, kp_dim)
        keypoints.append(KeypointSet(kps, desc))
    if reader.offset != len(reader.data):
        raise BundleFormatError("Trailing bytes after sparse model", path)
    for track in tracks:
        if len(track) and (track[:, 0].max() >= n_images):
            raise BundleFormatError("Track references an unknown image", path)
    return SparseModel(xyz, rgb, tracks, descriptors, image_ids, poses, keypoints)
