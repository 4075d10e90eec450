from dataclasses import dataclass, field
from functools import cached_property
from typing import List, Optional

import numpy as np

from hybrid_pad.core.geometry.rotations import (
    canonicalize_quaternion,
    from_scipy,
    matrix_to_quaternion,
    quaternion_to_matrix,
    to_scipy,
)

DEFECT_KINDS = ("burr", "stain", "missing")


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid world -> camera transform: x_cam = R @ x_world + t."""

    quaternion: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        q = canonicalize_quaternion(self.quaternion).copy()
        t = np.asarray(self.translation, dtype=np.float64).reshape(3).copy()
        if not np.all(np.isfinite(t)):
            raise ValueError(f"Non-finite translation: {t}")
        q.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "quaternion", q)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @classmethod
    def from_matrix(cls, R: np.ndarray, t: np.ndarray) -> "Pose":
        return cls(matrix_to_quaternion(R), t)

    @cached_property
    def rotation(self) -> np.ndarray:
        """3x3 world -> camera rotation."""
        R = quaternion_to_matrix(self.quaternion)
        R.setflags(write=False)
        return R

    @property
    def matrix(self) -> np.ndarray:
        """4x4 homogeneous world -> camera matrix."""
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def compose(self, other: "Pose") -> "Pose":
        """Apply `other` first, then self."""
        rot = to_scipy(self.quaternion) * to_scipy(other.quaternion)
        return Pose(from_scipy(rot), self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        rot = to_scipy(self.quaternion).inv()
        return Pose(from_scipy(rot), -(self.rotation.T @ self.translation))

    def transform(self, points: np.ndarray) -> np.ndarray:
        """World points (N, 3) -> camera coordinates."""
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def as_dict(self) -> dict:
        return {"quaternion": self.quaternion.tolist(), "translation": self.translation.tolist()}

    def __repr__(self) -> str:
        q = np.array2string(self.quaternion, precision=4)
        t = np.array2string(self.translation, precision=4)
        return f"Pose(q={q}, t={t})"


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera. Pixel centers sit at integer coordinates."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"Focal lengths must be positive: fx={self.fx}, fy={self.fy}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"Invalid image size {self.width}x{self.height}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(f"Principal point ({self.cx}, {self.cy}) outside image")

    @classmethod
    def from_fov(cls, width: int, height: int, fov_x: float) -> "CameraModel":
        """Square pixels, principal point at the image center."""
        fx = width / (2.0 * np.tan(fov_x / 2.0))
        return cls(fx=fx, fy=fx, cx=width / 2.0, cy=height / 2.0, width=width, height=height)

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def fov_x(self) -> float:
        return float(2.0 * np.arctan(self.width / (2.0 * self.fx)))

    def scaled(self, factor: int) -> "CameraModel":
        return CameraModel(
            self.fx * factor,
            self.fy * factor,
            self.cx * factor,
            self.cy * factor,
            self.width * factor,
            self.height * factor,
        )

    def as_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
        }


@dataclass(frozen=True, eq=False)
class ImageBuffer:
    """Row-major image, samples in [0, 1], shape (height, width, channels)."""

    data: np.ndarray

    def __post_init__(self) -> None:
        data = np.array(self.data, dtype=np.float32, order="C")
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3 or data.shape[2] not in (1, 3):
            raise ValueError(f"Expected (H, W, 1|3) image, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("Image contains non-finite samples")
        if data.size and (data.min() < -1e-6 or data.max() > 1.0 + 1e-6):
            raise ValueError(f"Image samples outside [0, 1]: [{data.min()}, {data.max()}]")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @classmethod
    def from_uint8(cls, pixels: np.ndarray) -> "ImageBuffer":
        return cls(np.asarray(pixels, dtype=np.uint8).astype(np.float32) / np.float32(255.0))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def gray(self) -> np.ndarray:
        """Channel mean as float64 (H, W)."""
        return self.data.astype(np.float64).mean(axis=2)

    def rgb(self) -> np.ndarray:
        """Float64 (H, W, 3); single-channel images are replicated."""
        data = self.data.astype(np.float64)
        return np.repeat(data, 3, axis=2) if data.shape[2] == 1 else data

    def to_uint8(self) -> np.ndarray:
        return np.round(np.clip(self.data, 0.0, 1.0) * 255.0).astype(np.uint8)

    def quantized(self) -> "ImageBuffer":
        """Round-trip through 8 bits so the buffer equals its PNG reload."""
        return ImageBuffer.from_uint8(self.to_uint8())

    def equals(self, other: "ImageBuffer") -> bool:
        return self.shape == other.shape and bool(np.array_equal(self.data, other.data))


@dataclass(frozen=True, eq=False)
class ReferenceView:
    """Anomaly-free image with its known pose."""

    image_id: str
    image: ImageBuffer
    pose: Pose


@dataclass(frozen=True, eq=False)
class QueryView:
    """Pose-unknown image; mask, defect label and pose are ground truth when known."""

    image_id: str
    image: ImageBuffer
    mask: Optional[np.ndarray] = None
    pose: Optional[Pose] = None
    defect: str = "good"

    @property
    def is_anomalous(self) -> bool:
        if self.mask is not None:
            return bool(self.mask.any())
        return self.defect != "good"


@dataclass(frozen=True, eq=False)
class SceneBundle:
    """Posed references plus queries of one object, all sharing a camera."""

    object_id: str
    camera: CameraModel
    references: List[ReferenceView]
    queries: List[QueryView] = field(default_factory=list)

    def __post_init__(self) -> None:
        shape = (self.camera.height, self.camera.width)
        for view in [*self.references, *self.queries]:
            if (view.image.height, view.image.width) != shape:
                raise ValueError(
                    f"Image {view.image_id} is {view.image.width}x{view.image.height}, "
                    f"camera is {self.camera.width}x{self.camera.height}"
                )
        for query in self.queries:
            if query.mask is not None and query.mask.shape != shape:
                raise ValueError(f"Mask of {query.image_id} has shape {query.mask.shape}")
        ids = [v.image_id for v in self.references] + [q.image_id for q in self.queries]
        if len(set(ids)) != len(ids):
            raise ValueError("Duplicate image ids in scene")

    @property
    def reference_ids(self) -> List[str]:
        return [view.image_id for view in self.references]


@dataclass(frozen=True)
class DefectSpec:
    """Defect to inject into synthetic queries; size is a fraction of the object extent."""

    kind: str
    size: float = 0.08
    seed: int = 0
    count: int = 1

    def __post_init__(self) -> None:
        if self.kind not in DEFECT_KINDS:
            raise ValueError(f"Unknown defect kind '{self.kind}', expected one of {DEFECT_KINDS}")
        if not 0.0 < self.size <= 0.2:
            raise ValueError(f"Defect size must be in (0, 0.2], got {self.size}")
        if self.count < 1:
            raise ValueError(f"Defect count must be >= 1, got {self.count}")


@dataclass
class StageTimings:
    """Wall-clock milliseconds spent per inference stage for one query."""

    localization_ms: float = 0.0
    nvs_ms: float = 0.0
    scoring_ms: float = 0.0
    total_ms: float = 0.0

    def as_dict(self) -> dict:
        return {
            "localization_ms": self.localization_ms,
            "nvs_ms": self.nvs_ms,
            "scoring_ms": self.scoring_ms,
            "total_ms": self.total_ms,
        }
