"""Procedural desk-scale scenes rendered by a CPU ray tracer.

The object is an assembly of axis-aligned colored blocks standing on a square footprint
(a random height field). Faces carry a checker texture and Lambert shading under a fixed
directional light, so appearance is view-independent. Defects are injected in 3D:

* burr: an extra block glued onto a visible surface point
* missing: a visible block removed (its former footprint is the ground truth)
* stain: a disc on one visible block face recolored

Ground-truth masks come from a per-sample defect-ID channel, thresholded at 50% coverage.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from hybrid_pad.core.geometry.camera import pixel_rays
from hybrid_pad.core.geometry.se3 import look_at
from hybrid_pad.core.types import (
    CameraModel,
    DefectSpec,
    ImageBuffer,
    Pose,
    QueryView,
    ReferenceView,
    SceneBundle,
)

logger = logging.getLogger(__name__)

GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))
ROW_BLOCK = 16
STAIN_COLOR = np.array([0.28, 0.16, 0.07])
PALETTE = np.array(
    [
        [0.85, 0.25, 0.20],
        [0.20, 0.55, 0.85],
        [0.95, 0.75, 0.20],
        [0.30, 0.70, 0.35],
        [0.65, 0.35, 0.75],
        [0.90, 0.50, 0.15],
        [0.25, 0.75, 0.75],
        [0.80, 0.80, 0.78],
    ]
)


@dataclass
class SyntheticSceneConfig:
    object_id: str = "synthetic"
    image_size: int = 128
    fov_deg: float = 40.0
    supersample: int = 2
    grid_size: int = 4
    cell_size: float = 0.25
    checker_frequency: float = 16.0
    camera_radius: float = 2.6
    elevation_range_deg: Tuple[float, float] = (15.0, 65.0)
    ambient: float = 0.35
    light_direction: Tuple[float, float, float] = (0.4, -0.5, 0.8)
    background: List[float] = field(default_factory=lambda: [1.0, 1.0, 1.0])
    n_good: int = 20

    def __post_init__(self) -> None:
        if self.image_size < 32:
            raise ValueError(f"image_size must be >= 32, got {self.image_size}")
        if self.supersample < 1:
            raise ValueError(f"supersample must be >= 1, got {self.supersample}")
        if self.grid_size < 2:
            raise ValueError(f"grid_size must be >= 2, got {self.grid_size}")
        if self.n_good < 0:
            raise ValueError(f"n_good must be >= 0, got {self.n_good}")
        self.elevation_range_deg = tuple(self.elevation_range_deg)
        self.light_direction = tuple(self.light_direction)

    @property
    def extent(self) -> float:
        return self.grid_size * self.cell_size

    def camera(self) -> CameraModel:
        return CameraModel.from_fov(self.image_size, self.image_size, math.radians(self.fov_deg))


@dataclass
class Stain:
    center: np.ndarray
    radius: float
    block: int
    axis: int
    sign: float
    defect_id: int


@dataclass
class BlockScene:
    """Axis-aligned blocks; `ghost` blocks are not drawn but mark where a removed block was."""

    lo: np.ndarray
    hi: np.ndarray
    color: np.ndarray
    defect: np.ndarray
    ghost: np.ndarray
    stains: List[Stain] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.lo)

    def copy(self) -> "BlockScene":
        return BlockScene(
            self.lo.copy(), self.hi.copy(), self.color.copy(), self.defect.copy(), self.ghost.copy(), list(self.stains)
        )

    def add_block(self, lo: np.ndarray, hi: np.ndarray, color: np.ndarray, defect_id: int) -> None:
        self.lo = np.vstack([self.lo, lo])
        self.hi = np.vstack([self.hi, hi])
        self.color = np.vstack([self.color, color])
        self.defect = np.append(self.defect, defect_id)
        self.ghost = np.append(self.ghost, False)


def build_block_object(cfg: SyntheticSceneConfig, rng: np.random.Generator) -> BlockScene:
    """Height-field block assembly centered on the origin, resting on z = -extent / 2."""
    g, s = cfg.grid_size, cfg.cell_size
    heights = rng.integers(1, g + 1, size=(g, g))
    heights[g // 2, g // 2] = g
    lo, hi, color = [], [], []
    base = -cfg.extent / 2.0
    for i in range(g):
        for j in range(g):
            for k in range(heights[i, j]):
                corner = np.array([base + i * s, base + j * s, base + k * s])
                lo.append(corner)
                hi.append(corner + s)
                color.append(PALETTE[rng.integers(len(PALETTE))])
    n = len(lo)
    return BlockScene(
        np.array(lo), np.array(hi), np.array(color), np.zeros(n, dtype=np.int64), np.zeros(n, dtype=bool)
    )


def intersect_blocks(
    origins: np.ndarray, dirs: np.ndarray, lo: np.ndarray, hi: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Nearest slab hit per ray: (t, block index or -1, hit face axis)."""
    if len(lo) == 0:
        n = len(origins)
        return np.full(n, np.inf), np.full(n, -1, dtype=np.int64), np.zeros(n, dtype=np.int64)
    safe = np.where(np.abs(dirs) < 1e-12, np.where(dirs < 0, -1e-12, 1e-12), dirs)
    inv = 1.0 / safe
    t1 = (lo[None, :, :] - origins[:, None, :]) * inv[:, None, :]
    t2 = (hi[None, :, :] - origins[:, None, :]) * inv[:, None, :]
    t_min = np.minimum(t1, t2)
    t_near = t_min.max(axis=-1)
    t_far = np.maximum(t1, t2).min(axis=-1)
    hit = (t_near <= t_far) & (t_near > 1e-9)
    t_near = np.where(hit, t_near, np.inf)
    block = np.argmin(t_near, axis=1)
    rows = np.arange(len(origins))
    t = t_near[rows, block]
    axis = np.argmax(t_min[rows, block], axis=-1)
    block = np.where(np.isfinite(t), block, -1)
    return t, block, axis


@dataclass
class TraceResult:
    rgb: np.ndarray
    defect: np.ndarray
    block: np.ndarray
    face: np.ndarray
    points: np.ndarray
    normals: np.ndarray


def trace_rays(scene: BlockScene, origins: np.ndarray, dirs: np.ndarray, cfg: SyntheticSceneConfig) -> TraceResult:
    solid = np.flatnonzero(~scene.ghost)
    t, local, axis = intersect_blocks(origins, dirs, scene.lo[solid], scene.hi[solid])
    hit = local >= 0
    block = np.where(hit, solid[np.maximum(local, 0)], -1)
    rows = np.arange(len(origins))
    sign = -np.sign(dirs[rows, axis])
    normals = np.zeros_like(dirs)
    normals[rows, axis] = sign
    points = origins + dirs * np.where(hit, t, 0.0)[:, None]

    base = scene.color[np.maximum(block, 0)].copy()
    in_plane = np.floor(points * cfg.checker_frequency).astype(np.int64)
    in_plane[rows, axis] = 0
    checker = np.where(in_plane.sum(axis=1) % 2 == 0, 1.0, 0.82)
    defect = np.where(hit, scene.defect[np.maximum(block, 0)], 0)
    for stain in scene.stains:
        on = (
            (block == stain.block)
            & (axis == stain.axis)
            & (sign == stain.sign)
            & (np.linalg.norm(points - stain.center, axis=1) <= stain.radius)
        )
        base[on] = STAIN_COLOR
        checker = np.where(on, 1.0, checker)
        defect = np.where(on, stain.defect_id, defect)

    if scene.ghost.any():
        _, any_block, _ = intersect_blocks(origins, dirs, scene.lo, scene.hi)
        ghost_hit = (any_block >= 0) & scene.ghost[np.maximum(any_block, 0)]
        defect = np.where(ghost_hit, scene.defect[np.maximum(any_block, 0)], defect)

    light = np.asarray(cfg.light_direction, dtype=np.float64)
    light = light / np.linalg.norm(light)
    lambert = np.clip(normals @ light, 0.0, None)
    shade = cfg.ambient + (1.0 - cfg.ambient) * lambert
    rgb = np.clip(base * (checker * shade)[:, None], 0.0, 1.0)
    rgb = np.where(hit[:, None], rgb, np.asarray(cfg.background, dtype=np.float64))
    face = np.where(hit, block * 6 + axis * 2 + (sign > 0), -1)
    return TraceResult(rgb, defect, block, face, points, normals)


def render_view(
    scene: BlockScene, cam: CameraModel, pose: Pose, cfg: SyntheticSceneConfig, max_workers: Optional[int] = None
) -> Tuple[ImageBuffer, np.ndarray]:
    """Supersampled 8-bit render plus the binary defect mask."""
    ss = cfg.supersample
    offsets = (np.arange(ss) + 0.5) / ss - 0.5

    def block(row0: int) -> Tuple[np.ndarray, np.ndarray]:
        rows = np.arange(row0, min(row0 + ROW_BLOCK, cam.height))
        sub_r = (rows[:, None] + offsets[None, :]).reshape(-1)
        sub_c = (np.arange(cam.width)[:, None] + offsets[None, :]).reshape(-1)
        rr, cc = np.meshgrid(sub_r, sub_c, indexing="ij")
        origins, dirs = pixel_rays(cam, pose, rr.reshape(-1), cc.reshape(-1))
        traced = trace_rays(scene, np.ascontiguousarray(origins), dirs, cfg)
        shape = (len(rows), ss, cam.width, ss)
        rgb = traced.rgb.reshape(*shape, 3).mean(axis=(1, 3))
        coverage = (traced.defect > 0).reshape(shape).mean(axis=(1, 3))
        return rgb, coverage

    with ThreadPoolExecutor(max_workers=max_workers) as executor:
        parts = list(executor.map(block, range(0, cam.height, ROW_BLOCK)))
    rgb = np.concatenate([p[0] for p in parts], axis=0)
    coverage = np.concatenate([p[1] for p in parts], axis=0)
    image = ImageBuffer.from_uint8(np.round(rgb * 255.0).astype(np.uint8))
    return image, coverage >= 0.5


def sphere_poses(count: int, cfg: SyntheticSceneConfig) -> List[Pose]:
    """Fibonacci spiral over the elevation band, all looking at the origin."""
    lo, hi = (math.radians(a) for a in cfg.elevation_range_deg)
    poses = []
    for i in range(count):
        s = math.sin(lo) + (math.sin(hi) - math.sin(lo)) * (i + 0.5) / count
        poses.append(_orbit_pose(math.asin(s), i * GOLDEN_ANGLE, cfg.camera_radius))
    return poses


def random_poses(count: int, cfg: SyntheticSceneConfig, rng: np.random.Generator) -> List[Pose]:
    lo, hi = (math.sin(math.radians(a)) for a in cfg.elevation_range_deg)
    poses = []
    for _ in range(count):
        elevation = math.asin(rng.uniform(lo, hi))
        azimuth = rng.uniform(0.0, 2.0 * math.pi)
        radius = cfg.camera_radius * rng.uniform(0.95, 1.05)
        poses.append(_orbit_pose(elevation, azimuth, radius))
    return poses


def _orbit_pose(elevation: float, azimuth: float, radius: float) -> Pose:
    center = radius * np.array(
        [math.cos(elevation) * math.cos(azimuth), math.cos(elevation) * math.sin(azimuth), math.sin(elevation)]
    )
    return look_at(center, np.zeros(3))


def _placement_pixels(scene: BlockScene, cam: CameraModel, pose: Pose, cfg: SyntheticSceneConfig):
    """Candidate pixels well inside one visible block face, else inside the silhouette."""
    rr, cc = np.meshgrid(np.arange(cam.height, dtype=np.float64), np.arange(cam.width, dtype=np.float64), indexing="ij")
    origins, dirs = pixel_rays(cam, pose, rr.reshape(-1), cc.reshape(-1))
    traced = trace_rays(scene, np.ascontiguousarray(origins), dirs, cfg)
    face = traced.face.reshape(cam.height, cam.width)
    uniform = (ndimage.minimum_filter(face, size=7) == ndimage.maximum_filter(face, size=7)) & (face >= 0)
    candidates = np.flatnonzero(uniform.reshape(-1))
    if len(candidates) == 0:
        candidates = np.flatnonzero(ndimage.binary_erosion(face >= 0, iterations=2).reshape(-1))
    if len(candidates) == 0:
        candidates = np.flatnonzero(face.reshape(-1) >= 0)
    return candidates, traced


def inject_defects(
    scene: BlockScene,
    defect_spec: DefectSpec,
    cam: CameraModel,
    pose: Pose,
    cfg: SyntheticSceneConfig,
    rng: np.random.Generator,
) -> BlockScene:
    """Copy of `scene` with `defect_spec.count` defects placed on surfaces visible from `pose`."""
    if defect_spec.size * cfg.extent > cfg.extent:
        raise ValueError(f"Defect size {defect_spec.size} exceeds the object extent")
    result = scene.copy()
    candidates, traced = _placement_pixels(scene, cam, pose, cfg)
    if len(candidates) == 0:
        raise ValueError("Object not visible from the query pose; cannot place a defect")
    radius = defect_spec.size * cfg.extent
    placed: List[np.ndarray] = []
    used_blocks: List[int] = []
    for defect_id in range(1, defect_spec.count + 1):
        for _ in range(32):
            pixel = int(rng.choice(candidates))
            point = traced.points[pixel]
            block = int(traced.block[pixel])
            if all(np.linalg.norm(point - p) > 2.5 * radius for p in placed) and block not in used_blocks:
                break
        placed.append(point)
        used_blocks.append(block)
        normal = traced.normals[pixel]
        if defect_spec.kind == "burr":
            half = radius / 2.0
            center = point + normal * half
            color = np.clip(result.color[block] * 0.6 + 0.35, 0.0, 1.0)
            result.add_block(center - half, center + half, color, defect_id)
        elif defect_spec.kind == "missing":
            result.ghost[block] = True
            result.defect[block] = defect_id
        else:
            axis = int(np.argmax(np.abs(normal)))
            result.stains.append(Stain(point, radius, block, axis, float(normal[axis]), defect_id))
    return result


def generate_synthetic_scene(
    cfg: Optional[SyntheticSceneConfig] = None,
    n_ref: int = 64,
    n_query: int = 60,
    defects: Sequence[DefectSpec] = (),
    seed: int = 0,
    max_workers: Optional[int] = None,
) -> SceneBundle:
    """References on a spiral, defective queries cycling over `defects`, plus cfg.n_good clean queries.

    Clean queries are only rendered when n_query > 0.
    """
    cfg = cfg or SyntheticSceneConfig()
    if n_ref < 8:
        raise ValueError(f"n_ref must be >= 8, got {n_ref}")
    if n_query < 0:
        raise ValueError(f"n_query must be >= 0, got {n_query}")
    if n_query > 0 and not defects:
        raise ValueError("Defective queries requested without any DefectSpec")
    rng = np.random.default_rng(seed)
    scene = build_block_object(cfg, rng)
    cam = cfg.camera()
    logger.info(f"Synthetic object: {len(scene)} blocks; rendering {n_ref} references at {cam.width}x{cam.height}")

    references = []
    for i, pose in enumerate(sphere_poses(n_ref, cfg)):
        image, _ = render_view(scene, cam, pose, cfg, max_workers)
        references.append(ReferenceView(f"r_{i:03d}", image, pose))

    queries = []
    n_good = cfg.n_good if n_query > 0 else 0
    query_poses = random_poses(n_query + n_good, cfg, rng)
    for i in range(n_query):
        defect_spec = defects[i % len(defects)]
        pose = query_poses[i]
        defect_rng = np.random.default_rng([seed, i, defect_spec.seed])
        defective = inject_defects(scene, defect_spec, cam, pose, cfg, defect_rng)
        image, mask = render_view(defective, cam, pose, cfg, max_workers)
        queries.append(QueryView(f"{defect_spec.kind}_{i:03d}", image, mask=mask, pose=pose, defect=defect_spec.kind))
    for i in range(n_good):
        pose = query_poses[n_query + i]
        image, mask = render_view(scene, cam, pose, cfg, max_workers)
        queries.append(QueryView(f"good_{i:03d}", image, mask=mask, pose=pose, defect="good"))

    logger.info(f"Synthetic scene '{cfg.object_id}': {len(references)} references, {len(queries)} queries")
    return SceneBundle(cfg.object_id, cam, references, queries)
