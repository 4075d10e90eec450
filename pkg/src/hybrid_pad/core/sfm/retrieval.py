"""Image-level descriptors and the reference retrieval database."""
import io
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Tuple

import numpy as np
from scipy import ndimage

from hybrid_pad.core.errors import BundleFormatError
from hybrid_pad.core.sfm.sparse_model import ByteReader
from hybrid_pad.core.types import ImageBuffer

logger = logging.getLogger(__name__)

LOW_CONTRAST_STD = 1e-6
DB_MAGIC = b"PRDB"
DB_VERSION = 1


@dataclass(frozen=True, eq=False)
class GlobalDescriptor:
    """Unit-norm image summary; low_contrast marks images with no usable structure."""

    vector: np.ndarray
    low_contrast: bool = False

    def __post_init__(self) -> None:
        vector = np.asarray(self.vector, dtype=np.float64).copy()
        norm = np.linalg.norm(vector)
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"Descriptor must be unit-norm, got norm {norm}")
        vector.setflags(write=False)
        object.__setattr__(self, "vector", vector)

    @property
    def dim(self) -> int:
        return self.vector.shape[0]

    def similarity(self, other: "GlobalDescriptor") -> float:
        return float(self.vector @ other.vector)


def _grid_means(values: np.ndarray, cells: int) -> np.ndarray:
    """Mean of `values` (H, W, ...) over a cells x cells grid of near-equal blocks."""
    h, w = values.shape[:2]
    rows = np.linspace(0, h, cells + 1).astype(int)[:-1]
    cols = np.linspace(0, w, cells + 1).astype(int)[:-1]
    sums = np.add.reduceat(np.add.reduceat(values, rows, axis=0), cols, axis=1)
    heights = np.diff(np.append(rows, h))
    widths = np.diff(np.append(cols, w))
    counts = np.outer(heights, widths)
    return sums / counts.reshape(counts.shape + (1,) * (values.ndim - 2))


def _orientation_histogram(magnitude: np.ndarray, orientation: np.ndarray, bins: int) -> np.ndarray:
    """Magnitude-weighted histogram with linear soft binning, circularly smoothed."""
    position = (orientation % (2 * np.pi)) / (2 * np.pi) * bins
    lower = np.floor(position).astype(int) % bins
    frac = position - np.floor(position)
    hist = np.bincount(lower.ravel(), weights=(magnitude * (1 - frac)).ravel(), minlength=bins)
    hist += np.bincount(((lower + 1) % bins).ravel(), weights=(magnitude * frac).ravel(), minlength=bins)
    return ndimage.gaussian_filter1d(hist, sigma=1.5, mode="wrap")


def _standardize(block: np.ndarray) -> np.ndarray:
    """Zero mean, unit norm; constant blocks become zeros."""
    block = block - block.mean()
    norm = np.linalg.norm(block)
    return block / norm if norm > 1e-12 else np.zeros_like(block)


def compute_global_descriptor(img: ImageBuffer, grid: int = 8, bins: int = 64) -> GlobalDescriptor:
    """Color layout, gradient-energy layout and per-quadrant orientation histograms, whitened.

    Default layout: 8x8x3 color means (192) + 8x8 gradient magnitudes (64) + 4 quadrants x 64
    orientation bins (256) = 512 dimensions.
    """
    rgb = img.rgb()
    gray = rgb.mean(axis=2)
    dim = grid * grid * 4 + 4 * bins
    if gray.std() < LOW_CONTRAST_STD:
        return GlobalDescriptor(np.full(dim, 1.0 / np.sqrt(dim)), low_contrast=True)

    smooth = ndimage.gaussian_filter(gray, 1.0)
    gx = ndimage.sobel(smooth, axis=1) / 8.0
    gy = ndimage.sobel(smooth, axis=0) / 8.0
    magnitude = np.hypot(gx, gy)
    orientation = np.arctan2(gy, gx)

    color = _grid_means(rgb, grid).ravel()
    energy = _grid_means(magnitude[:, :, None], grid).ravel()
    h, w = gray.shape
    quadrants = []
    for rs in (slice(0, h // 2), slice(h // 2, h)):
        for cs in (slice(0, w // 2), slice(w // 2, w)):
            quadrants.append(_orientation_histogram(magnitude[rs, cs], orientation[rs, cs], bins))

    blocks = [_standardize(color), _standardize(energy)] + [_standardize(q) for q in quadrants]
    vector = np.concatenate(blocks)
    norm = np.linalg.norm(vector)
    if norm < 1e-12:
        return GlobalDescriptor(np.full(dim, 1.0 / np.sqrt(dim)), low_contrast=True)
    return GlobalDescriptor(vector / norm)


class RetrievalDatabase:
    """Reference image id -> global descriptor, queried by cosine similarity."""

    def __init__(self, entries: Iterable[Tuple[str, GlobalDescriptor]] = ()):
        self._ids: List[str] = []
        self._index: Dict[str, int] = {}
        self._vectors: List[np.ndarray] = []
        self._low_contrast: List[bool] = []
        self._matrix = None
        for image_id, descriptor in entries:
            self.add(image_id, descriptor)

    def add(self, image_id: str, descriptor: GlobalDescriptor) -> None:
        if image_id in self._index:
            raise ValueError(f"Duplicate image id in retrieval database: {image_id}")
        if self._vectors and descriptor.dim != self._vectors[0].shape[0]:
            raise ValueError(f"Descriptor dimension {descriptor.dim} != {self._vectors[0].shape[0]}")
        self._index[image_id] = len(self._ids)
        self._ids.append(image_id)
        self._vectors.append(descriptor.vector)
        self._low_contrast.append(descriptor.low_contrast)
        self._matrix = None

    def __len__(self) -> int:
        return len(self._ids)

    def __contains__(self, image_id: str) -> bool:
        return image_id in self._index

    @property
    def ids(self) -> List[str]:
        return list(self._ids)

    @property
    def matrix(self) -> np.ndarray:
        """(n, dim) stacked descriptors in insertion order."""
        if self._matrix is None:
            self._matrix = np.stack(self._vectors) if self._vectors else np.zeros((0, 0))
        return self._matrix

    def descriptor(self, image_id: str) -> GlobalDescriptor:
        i = self._index[image_id]
        return GlobalDescriptor(self._vectors[i], self._low_contrast[i])


def retrieve_top_k(q: GlobalDescriptor, db: RetrievalDatabase, k: int) -> List[str]:
    """Ids of the k most similar entries, by descending cosine similarity then ascending id."""
    if len(db) == 0:
        raise ValueError("Retrieval database is empty")
    if not 1 <= k <= len(db):
        raise ValueError(f"k={k} outside [1, {len(db)}]")
    sims = db.matrix @ q.vector
    ids = np.array(db.ids)
    id_rank = np.argsort(np.argsort(ids, kind="stable"), kind="stable")
    order = np.lexsort((id_rank, -sims))
    return [str(ids[i]) for i in order[:k]]


def write_retrieval_database(path: Path, db: RetrievalDatabase) -> None:
    """Magic, <III version/count/dim, then per entry: u16 id length, utf8 id, u8 low-contrast flag, f8 vector."""
    dim = db.matrix.shape[1] if len(db) else 0
    buf = io.BytesIO()
    buf.write(DB_MAGIC)
    buf.write(struct.pack("<III", DB_VERSION, len(db), dim))
    for image_id in db.ids:
        name = image_id.encode("utf-8")
        descriptor = db.descriptor(image_id)
        buf.write(struct.pack("<H", len(name)))
        buf.write(name)
        buf.write(struct.pack("<B", int(descriptor.low_contrast)))
        buf.write(descriptor.vector.astype("<f8").tobytes())
    path.write_bytes(buf.getvalue())


def read_retrieval_database(path: Path) -> RetrievalDatabase:
    reader = ByteReader(path.read_bytes(), path)
    if reader.take(4) != DB_MAGIC:
        raise BundleFormatError("Not a retrieval database file", path)
    version, count, dim = reader.unpack("<III")
    if version != DB_VERSION:
        raise BundleFormatError(f"Unsupported retrieval database version {version}", path)
    db = RetrievalDatabase()
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        image_id = reader.take(name_len).decode("utf-8")
        (low_contrast,) = reader.unpack("<B")
        try:
            db.add(image_id, GlobalDescriptor(reader.array("<f8", dim), bool(low_contrast)))
        except ValueError as e:
            raise BundleFormatError(f"Corrupt retrieval entry '{image_id}' ({e})", path) from e
    if reader.offset != len(reader.data):
        raise BundleFormatError("Trailing bytes after retrieval database", path)
    return db
