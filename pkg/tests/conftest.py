import numpy as np
import pytest
import torch

from hybrid_pad.core.data.synthetic import SyntheticSceneConfig, generate_synthetic_scene
from hybrid_pad.core.splatting.gaussians import MAX_SH_COEFFS, GaussianCloud
from hybrid_pad.core.types import DEFECT_KINDS, CameraModel, DefectSpec, Pose


def random_pose(rng: np.random.Generator, max_translation: float = 2.0) -> Pose:
    q = rng.normal(size=4)
    return Pose(q / np.linalg.norm(q), rng.uniform(-max_translation, max_translation, 3))


def points_in_front(rng: np.random.Generator, pose: Pose, n: int, near: float = 1.0, far: float = 5.0) -> np.ndarray:
    """World points whose camera-space depth lies in [near, far] and that land near the image."""
    z = rng.uniform(near, far, n)
    xy = rng.uniform(-0.4, 0.4, (n, 2)) * z[:, None]
    cam_points = np.column_stack([xy, z])
    return (cam_points - pose.translation) @ pose.rotation


def random_cloud(
    rng: np.random.Generator,
    n: int,
    dtype: torch.dtype = torch.float64,
    center=(0.0, 0.0, 3.0),
    spread: float = 0.4,
    sh_degree: int = 3,
) -> GaussianCloud:
    """Gaussians in front of an identity camera looking down +z."""
    sh = rng.normal(0.0, 0.3, (n, MAX_SH_COEFFS, 3))
    sh[:, 0, :] = rng.uniform(-1.0, 1.0, (n, 3))
    return GaussianCloud(
        means=torch.tensor(np.asarray(center) + rng.uniform(-spread, spread, (n, 3)), dtype=dtype),
        quats=torch.tensor(rng.normal(size=(n, 4)), dtype=dtype),
        log_scales=torch.tensor(rng.uniform(np.log(0.05), np.log(0.2), (n, 3)), dtype=dtype),
        opacity_logits=torch.tensor(rng.uniform(-1.0, 2.0, n), dtype=dtype),
        sh=torch.tensor(sh, dtype=dtype),
        sh_degree=sh_degree,
        active_sh_degree=sh_degree,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def camera():
    return CameraModel(fx=80.0, fy=80.0, cx=32.0, cy=24.0, width=64, height=48)


@pytest.fixture
def small_camera():
    return CameraModel(fx=10.0, fy=10.0, cx=4.0, cy=4.0, width=8, height=8)


@pytest.fixture(scope="session")
def tiny_scene_config():
    return SyntheticSceneConfig(image_size=64, supersample=1, n_good=3)


@pytest.fixture(scope="session")
def tiny_scene(tiny_scene_config):
    """12 references, one defective query per kind plus 3 clean queries, 64x64."""
    defects = [DefectSpec(kind, size=0.1) for kind in DEFECT_KINDS]
    return generate_synthetic_scene(tiny_scene_config, n_ref=12, n_query=3, defects=defects, seed=7)
