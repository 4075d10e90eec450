"""Deterministic five-level feature pyramid used to compare a query with its pseudo-reference.

Level 1 holds the blurred RGB image plus its gradient magnitude. Every further level halves the
resolution (ceil) of the previous level's channel mean and applies a fixed bank of eight zero-sum
3x3 filters (four first-derivative, four second-derivative), keeping absolute responses.
"""
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

import numpy as np
from scipy import ndimage

from hybrid_pad.core.errors import SceneFormatError
from hybrid_pad.core.types import ImageBuffer

logger = logging.getLogger(__name__)

PYRAMID_LEVELS = 5
SIDECAR_MAGIC = b"PFEA"
SIDECAR_VERSION = 1

FILTER_BANK = np.array(
    [
        [[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]],
        [[-1, -2, -1], [0, 0, 0], [1, 2, 1]],
        [[0, 1, 2], [-1, 0, 1], [-2, -1, 0]],
        [[2, 1, 0], [1, 0, -1], [0, -1, -2]],
        [[0, 1, 0], [1, -4, 1], [0, 1, 0]],
        [[1, -2, 1], [2, -4, 2], [1, -2, 1]],
        [[1, 2, 1], [-2, -4, -2], [1, 2, 1]],
        [[1, 0, -1], [0, 0, 0], [-1, 0, 1]],
    ],
    dtype=np.float64,
) / 8.0


@dataclass(eq=False)
class FeaturePyramid:
    levels: List[np.ndarray]  # (H_l, W_l, C_l) float32

    def __post_init__(self) -> None:
        if len(self.levels) != PYRAMID_LEVELS:
            raise ValueError(f"Feature pyramid needs {PYRAMID_LEVELS} levels, got {len(self.levels)}")
        for i, level in enumerate(self.levels):
            if level.ndim != 3:
                raise ValueError(f"Level {i + 1} must be (H, W, C), got shape {level.shape}")

    @property
    def shapes(self) -> List[tuple]:
        return [level.shape for level in self.levels]

    def equals(self, other: "FeaturePyramid") -> bool:
        return all(np.array_equal(a, b) for a, b in zip(self.levels, other.levels))


def downsample2(channel: np.ndarray) -> np.ndarray:
    """2x2 mean pooling to ceil(H/2) x ceil(W/2); odd edges are replicated."""
    h, w = channel.shape
    padded = np.pad(channel, ((0, h % 2), (0, w % 2)), mode="edge")
    return padded.reshape(padded.shape[0] // 2, 2, padded.shape[1] // 2, 2).mean(axis=(1, 3))


def _filter_bank(channel: np.ndarray) -> np.ndarray:
    responses = [np.abs(ndimage.correlate(channel, kernel, mode="nearest")) for kernel in FILTER_BANK]
    return np.stack(responses, axis=-1)


def extract_features(img: ImageBuffer, blur_sigma: float = 1.0) -> FeaturePyramid:
    if img.channels != 3:
        raise ValueError(f"Feature extraction needs a 3-channel image, got {img.channels}")
    rgb = img.rgb()
    blurred = np.stack([ndimage.gaussian_filter(rgb[..., c], blur_sigma) for c in range(3)], axis=-1)
    gray = blurred.mean(axis=-1)
    magnitude = np.hypot(ndimage.sobel(gray, axis=1), ndimage.sobel(gray, axis=0)) / 8.0
    levels = [np.concatenate([blurred, magnitude[..., None]], axis=-1)]
    for _ in range(PYRAMID_LEVELS - 1):
        levels.append(_filter_bank(downsample2(levels[-1].mean(axis=-1))))
    return FeaturePyramid([level.astype(np.float32) for level in levels])


def write_feature_sidecar(path: Path, pyramid: FeaturePyramid) -> None:
    """Little-endian: magic, u32 version, u32 level count, then per level u32 H, W, C and f32 data (H x W x C)."""
    parts = [SIDECAR_MAGIC, struct.pack("<II", SIDECAR_VERSION, len(pyramid.levels))]
    for level in pyramid.levels:
        parts.append(struct.pack("<III", *level.shape))
        parts.append(np.ascontiguousarray(level, dtype="<f4").tobytes())
    path.write_bytes(b"".join(parts))


def read_feature_sidecar(path: Path) -> FeaturePyramid:
    data = path.read_bytes()
    if len(data) < 12 or data[:4] != SIDECAR_MAGIC:
        raise SceneFormatError("Not a feature sidecar", path)
    version, count = struct.unpack_from("<II", data, 4)
    if version != SIDECAR_VERSION:
        raise SceneFormatError(f"Unsupported feature sidecar version {version}", path)
    offset = 12
    levels = []
    for _ in range(count):
        if offset + 12 > len(data):
            raise SceneFormatError("Truncated feature sidecar", path)
        h, w, c = struct.unpack_from("<III", data, offset)
        offset += 12
        size = h * w * c
        if offset + 4 * size > len(data):
            raise SceneFormatError("Truncated feature sidecar", path)
        level = np.frombuffer(data, dtype="<f4", count=size, offset=offset)
        levels.append(level.reshape(h, w, c).astype(np.float32))
        offset += 4 * size
    if offset != len(data):
        raise SceneFormatError("Trailing bytes in feature sidecar", path)
    try:
        return FeaturePyramid(levels)
    except ValueError as e:
        raise SceneFormatError(str(e), path) from e


def extract_features_for(
    image_id: str, img: ImageBuffer, sidecar_dir: Optional[str], blur_sigma: float = 1.0
) -> FeaturePyramid:
    """Pyramid from `<sidecar dir>/<image id>.pfea` when present, otherwise the built-in extractor."""
    if sidecar_dir:
        sidecar = Path(sidecar_dir) / f"{image_id}.pfea"
        if sidecar.exists():
            logger.debug(f"Using imported features for {image_id}")
            return read_feature_sidecar(sidecar)
    return extract_features(img, blur_sigma)
