"""Harris keypoints with sub-pixel refinement and 128-D gradient-histogram descriptors."""
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from hybrid_pad.core.errors import SceneFormatError
from hybrid_pad.core.sfm.sfm_config import SfmConfig
from hybrid_pad.core.types import ImageBuffer

logger = logging.getLogger(__name__)

DESCRIPTOR_DIM = 128
MIN_IMAGE_SIZE = 32
SIDECAR_MAGIC = b"PKPT"
SIDECAR_VERSION = 1
_PATCH = 16
_CELLS = 4
_ORI_BINS = 8
_REFINE_RADIUS = 5


@dataclass(frozen=True, eq=False)
class KeypointSet:
    """keypoints: (N, 4) float64 rows (u, v, scale, score); descriptors: (N, D) float32 unit rows."""

    keypoints: np.ndarray
    descriptors: np.ndarray

    def __post_init__(self) -> None:
        kps = np.asarray(self.keypoints, dtype=np.float64).reshape(-1, 4)
        desc = np.asarray(self.descriptors, dtype=np.float32)
        if desc.ndim != 2 or len(desc) != len(kps):
            raise ValueError(f"{len(desc)} descriptors for {len(kps)} keypoints")
        object.__setattr__(self, "keypoints", kps)
        object.__setattr__(self, "descriptors", desc)

    @classmethod
    def empty(cls, dim: int = DESCRIPTOR_DIM) -> "KeypointSet":
        return cls(np.zeros((0, 4)), np.zeros((0, dim), dtype=np.float32))

    def __len__(self) -> int:
        return len(self.keypoints)

    @property
    def uv(self) -> np.ndarray:
        return self.keypoints[:, :2]

    def equals(self, other: "KeypointSet") -> bool:
        return np.array_equal(self.keypoints, other.keypoints) and np.array_equal(
            self.descriptors, other.descriptors
        )


def _gradients(gray: np.ndarray):
    smooth = ndimage.gaussian_filter(gray, 1.0)
    return ndimage.sobel(smooth, axis=1) / 8.0, ndimage.sobel(smooth, axis=0) / 8.0


def _harris_response(ix: np.ndarray, iy: np.ndarray, sigma: float, k: float) -> np.ndarray:
    sxx = ndimage.gaussian_filter(ix * ix, sigma)
    syy = ndimage.gaussian_filter(iy * iy, sigma)
    sxy = ndimage.gaussian_filter(ix * iy, sigma)
    return sxx * syy - sxy * sxy - k * (sxx + syy) ** 2


def _refine_corner(ix: np.ndarray, iy: np.ndarray, row: int, col: int) -> tuple:
    """Gradient-orthogonality refinement: the corner is the point every nearby edge line passes through."""
    h, w = ix.shape
    u, v = float(col), float(row)
    for _ in range(3):
        r0, c0 = int(round(v)), int(round(u))
        rs = slice(max(r0 - _REFINE_RADIUS, 0), min(r0 + _REFINE_RADIUS + 1, h))
        cs = slice(max(c0 - _REFINE_RADIUS, 0), min(c0 + _REFINE_RADIUS + 1, w))
        gx, gy = ix[rs, cs].ravel(), iy[rs, cs].ravel()
        yy, xx = np.mgrid[rs, cs]
        xx, yy = xx.ravel().astype(np.float64), yy.ravel().astype(np.float64)
        a = np.array([[gx @ gx, gx @ gy], [gx @ gy, gy @ gy]])
        b = np.array([gx * gx @ xx + gx * gy @ yy, gx * gy @ xx + gy * gy @ yy])
        if np.linalg.cond(a) > 1e6:
            return float(col), float(row)
        nu, nv = np.linalg.solve(a, b)
        if abs(nu - col) > _REFINE_RADIUS or abs(nv - row) > _REFINE_RADIUS:
            return float(col), float(row)
        converged = abs(nu - u) < 1e-3 and abs(nv - v) < 1e-3
        u, v = nu, nv
        if converged:
            break
    return float(np.clip(u, 0, w - 1)), float(np.clip(v, 0, h - 1))


def describe(ix: np.ndarray, iy: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """4x4 cells x 8 orientation bins over a 16x16 bilinearly sampled gradient patch."""
    if len(uv) == 0:
        return np.zeros((0, DESCRIPTOR_DIM), dtype=np.float32)
    offsets = np.arange(_PATCH) - (_PATCH - 1) / 2.0
    dy, dx = np.meshgrid(offsets, offsets, indexing="ij")
    rows = uv[:, 1, None, None] + dy[None]
    cols = uv[:, 0, None, None] + dx[None]
    coords = np.stack([rows.ravel(), cols.ravel()])
    gx = ndimage.map_coordinates(ix, coords, order=1, mode="nearest").reshape(rows.shape)
    gy = ndimage.map_coordinates(iy, coords, order=1, mode="nearest").reshape(rows.shape)

    weight = np.exp(-(dx**2 + dy**2) / (2 * (_PATCH / 2.0) ** 2))
    magnitude = np.hypot(gx, gy) * weight[None]
    position = (np.arctan2(gy, gx) % (2 * np.pi)) / (2 * np.pi) * _ORI_BINS
    lower = np.floor(position).astype(int) % _ORI_BINS
    frac = position - np.floor(position)

    n = len(uv)
    cell = (np.arange(_PATCH) // (_PATCH // _CELLS))
    cell_index = (cell[:, None] * _CELLS + cell[None, :])[None].repeat(n, axis=0)
    base = (np.arange(n)[:, None, None] * _CELLS * _CELLS + cell_index) * _ORI_BINS
    hist = np.bincount((base + lower).ravel(), weights=(magnitude * (1 - frac)).ravel(),
                       minlength=n * DESCRIPTOR_DIM)
    hist += np.bincount((base + (lower + 1) % _ORI_BINS).ravel(), weights=(magnitude * frac).ravel(),
                        minlength=n * DESCRIPTOR_DIM)
    desc = hist.reshape(n, DESCRIPTOR_DIM)

    desc = _unit_rows(desc)
    desc = np.minimum(desc, 0.2)
    return _unit_rows(desc).astype(np.float32)


def _unit_rows(desc: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(desc, axis=1, keepdims=True)
    uniform = np.full(desc.shape[1], 1.0 / np.sqrt(desc.shape[1]))
    return np.where(norms > 1e-12, desc / np.maximum(norms, 1e-12), uniform)


def detect_and_describe(img: ImageBuffer, cfg: Optional[SfmConfig] = None) -> KeypointSet:
    """Strongest-first Harris corners, refined to sub-pixel, with their descriptors."""
    cfg = cfg or SfmConfig()
    if img.width < MIN_IMAGE_SIZE or img.height < MIN_IMAGE_SIZE:
        raise ValueError(f"Image must be at least {MIN_IMAGE_SIZE}x{MIN_IMAGE_SIZE}, got {img.width}x{img.height}")
    ix, iy = _gradients(img.gray())
    response = _harris_response(ix, iy, cfg.harris_sigma, cfg.harris_k)

    peak = response.max()
    threshold = max(cfg.harris_relative_threshold * peak, cfg.harris_absolute_threshold)
    local_max = response == ndimage.maximum_filter(response, size=2 * cfg.nms_radius + 1, mode="nearest")
    candidates = local_max & (response > threshold)
    b = cfg.border
    candidates[:b, :] = candidates[-b:, :] = False
    candidates[:, :b] = candidates[:, -b:] = False
    rows, cols = np.nonzero(candidates)
    if len(rows) == 0:
        return KeypointSet.empty()

    scores = response[rows, cols]
    order = np.lexsort((rows * img.width + cols, -scores))[: cfg.max_keypoints]
    rows, cols, scores = rows[order], cols[order], scores[order]

    uv = np.array([_refine_corner(ix, iy, r, c) for r, c in zip(rows, cols)]).reshape(-1, 2)
    keypoints = np.column_stack([uv, np.full(len(uv), cfg.harris_sigma), scores])
    return KeypointSet(keypoints, describe(ix, iy, uv))


def write_keypoint_sidecar(path: Path, kps: KeypointSet) -> None:
    """Little-endian: magic, u32 version, u32 count, u32 dim, f32 keypoints (N x 4), f32 descriptors (N x dim)."""
    dim = kps.descriptors.shape[1]
    header = SIDECAR_MAGIC + struct.pack("<III", SIDECAR_VERSION, len(kps), dim)
    body = kps.keypoints.astype("<f4").tobytes() + kps.descriptors.astype("<f4").tobytes()
    path.write_bytes(header + body)


def read_keypoint_sidecar(path: Path) -> KeypointSet:
    data = path.read_bytes()
    if len(data) < 16 or data[:4] != SIDECAR_MAGIC:
        raise SceneFormatError("Not a keypoint sidecar", path)
    version, count, dim = struct.unpack_from("<III", data, 4)
    if version != SIDECAR_VERSION:
        raise SceneFormatError(f"Unsupported keypoint sidecar version {version}", path)
    expected = 16 + 4 * count * (4 + dim)
    if len(data) != expected:
        raise SceneFormatError(f"Keypoint sidecar has {len(data)} bytes, expected {expected}", path)
    kps = np.frombuffer(data, dtype="<f4", count=count * 4, offset=16).reshape(count, 4)
    desc = np.frombuffer(data, dtype="<f4", count=count * dim, offset=16 + 16 * count).reshape(count, dim)
    return KeypointSet(kps.astype(np.float64), _unit_rows(desc.astype(np.float64)).astype(np.float32))


def extract_keypoints(image_id: str, img: ImageBuffer, cfg: SfmConfig) -> KeypointSet:
    """Keypoints from `<sidecar dir>/<image id>.pkpt` when present, otherwise the built-in detector."""
    if cfg.keypoint_sidecar_dir:
        sidecar = Path(cfg.keypoint_sidecar_dir) / f"{image_id}.pkpt"
        if sidecar.exists():
            logger.debug(f"Using imported keypoints for {image_id}")
            return read_keypoint_sidecar(sidecar)
    return detect_and_describe(img, cfg)
