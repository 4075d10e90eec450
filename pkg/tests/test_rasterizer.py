import numpy as np
import pytest
import torch
from conftest import random_cloud

from hybrid_pad.core.splatting.gaussians import MAX_SH_COEFFS, PARAMETER_NAMES, GaussianCloud, rgb_to_sh_dc
from hybrid_pad.core.splatting.projection import COV2D_DILATION, project_gaussian, project_gaussians
from hybrid_pad.core.splatting.rasterizer import (
    MAX_ALPHA,
    rasterize,
    rasterize_backward,
    rasterize_tensor,
)
from hybrid_pad.core.splatting.sh import SH_C0, eval_sh, num_sh_coeffs, sh_basis
from hybrid_pad.core.types import Pose


def _single(center=(0.0, 0.0, 3.0), rgb=(0.8, 0.2, 0.4), logit=0.0, scale=0.1):
    sh = torch.zeros((1, MAX_SH_COEFFS, 3), dtype=torch.float64)
    sh[0, 0] = torch.tensor(rgb_to_sh_dc(np.array(rgb)))
    return GaussianCloud(
        means=torch.tensor([center], dtype=torch.float64),
        quats=torch.tensor([[1.0, 0.0, 0.0, 0.0]], dtype=torch.float64),
        log_scales=torch.full((1, 3), np.log(scale), dtype=torch.float64),
        opacity_logits=torch.tensor([logit], dtype=torch.float64),
        sh=sh,
        sh_degree=3,
        active_sh_degree=0,
    )


def _concat(*clouds):
    params = {name: torch.cat([getattr(c, name) for c in clouds]) for name in PARAMETER_NAMES}
    return GaussianCloud(**params, sh_degree=3, active_sh_degree=0)


def _fibonacci_sphere(n):
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    phi = np.pi * (1.0 + 5**0.5) * i
    r = np.sqrt(1.0 - z * z)
    return torch.tensor(np.column_stack([r * np.cos(phi), r * np.sin(phi), z]))


# --- spherical harmonics ---


def test_sh_basis_is_orthonormal():
    dirs = _fibonacci_sphere(20000)
    basis = sh_basis(dirs, 3)
    gram = 4.0 * np.pi * (basis.T @ basis).numpy() / len(dirs)
    np.testing.assert_allclose(gram, np.eye(16), atol=1e-2)


def test_sh_degree_zero_is_constant():
    coeffs = torch.zeros((5, 16, 3), dtype=torch.float64)
    coeffs[:, 0] = 0.4
    dirs = _fibonacci_sphere(5)
    np.testing.assert_allclose(eval_sh(coeffs, dirs, 0).numpy(), SH_C0 * 0.4 + 0.5)
    assert num_sh_coeffs(3) == 16


def test_sh_rejects_bad_degree_and_short_coefficients():
    dirs = _fibonacci_sphere(2)
    with pytest.raises(ValueError):
        sh_basis(dirs, 4)
    with pytest.raises(ValueError):
        eval_sh(torch.zeros((2, 4, 3), dtype=torch.float64), dirs, 2)


def test_eval_sh_clamps_at_zero():
    coeffs = torch.zeros((1, 16, 3), dtype=torch.float64)
    coeffs[0, 0] = -10.0
    assert torch.all(eval_sh(coeffs, _fibonacci_sphere(1), 3) == 0.0)


# --- projection ---


def test_isotropic_covariance_on_axis(small_camera):
    splat = project_gaussian(_single(scale=0.2), Pose.identity(), small_camera)
    assert splat is not None
    np.testing.assert_allclose(splat.mean2d, [small_camera.cx, small_camera.cy])
    expected = (small_camera.fx * 0.2 / 3.0) ** 2 + COV2D_DILATION
    np.testing.assert_allclose(splat.cov2d, np.diag([expected, expected]), atol=1e-12)
    assert splat.depth == pytest.approx(3.0)
    assert splat.alpha == pytest.approx(0.5)


def test_gaussian_behind_camera_is_culled(small_camera):
    assert project_gaussian(_single(center=(0.0, 0.0, -2.0)), Pose.identity(), small_camera) is None


def test_far_off_screen_gaussian_is_culled(small_camera):
    proj = project_gaussians(_single(center=(50.0, 0.0, 3.0)), Pose.identity(), small_camera)
    assert not bool(proj.visible[0])


# --- rasterization ---


def test_empty_cloud_renders_background(camera):
    out = rasterize_tensor(GaussianCloud.empty(dtype=torch.float64), Pose.identity(), camera, (0.2, 0.3, 0.4))
    assert out.image.shape == (camera.height, camera.width, 3)
    np.testing.assert_allclose(out.image.numpy(), np.broadcast_to([0.2, 0.3, 0.4], out.image.shape))
    assert torch.all(out.transmittance == 1.0)


def test_single_gaussian_center_pixel(small_camera):
    out = rasterize_tensor(_single(), Pose.identity(), small_camera, (0.0, 0.0, 0.0))
    cx, cy = int(small_camera.cx), int(small_camera.cy)
    np.testing.assert_allclose(out.image[cy, cx].numpy(), [0.4, 0.1, 0.2], atol=1e-12)
    assert float(out.transmittance[cy, cx]) == pytest.approx(0.5)
    assert float(out.image[0, 0, 0]) < float(out.image[cy, cx, 0])


def test_nearer_opaque_gaussian_occludes(small_camera):
    far = _single(center=(0.0, 0.0, 5.0), rgb=(0.0, 1.0, 0.0), logit=10.0)
    near = _single(center=(0.0, 0.0, 2.0), rgb=(1.0, 0.0, 0.0), logit=10.0)
    out = rasterize_tensor(_concat(far, near), Pose.identity(), small_camera, (0.0, 0.0, 0.0))
    cx, cy = int(small_camera.cx), int(small_camera.cy)
    red, green = float(out.image[cy, cx, 0]), float(out.image[cy, cx, 1])
    assert red == pytest.approx(MAX_ALPHA)
    assert green < 0.02


def test_render_is_permutation_invariant(rng, camera):
    cloud = random_cloud(rng, 40)
    perm = torch.from_numpy(rng.permutation(40))
    a = rasterize_tensor(cloud, Pose.identity(), camera).image
    b = rasterize_tensor(cloud.index(perm), Pose.identity(), camera).image
    np.testing.assert_allclose(a.numpy(), b.numpy(), atol=1e-12)


def test_rasterize_returns_image_buffer(rng, camera):
    image = rasterize(random_cloud(rng, 20, dtype=torch.float32), Pose.identity(), camera)
    assert image.shape == (camera.height, camera.width, 3)
    assert image.data.min() >= 0.0 and image.data.max() <= 1.0


def test_screen_space_gradient_is_retained(rng, small_camera):
    cloud = random_cloud(rng, 6).requires_grad_()
    out = rasterize_tensor(cloud, Pose.identity(), small_camera)
    out.image.sum().backward()
    assert out.means2d.grad is not None
    assert out.means2d.grad.shape == (6, 2)


def test_gradients_match_finite_differences(rng, small_camera):
    cloud = random_cloud(rng, 6)
    cloud = cloud.replace(opacity_logits=torch.tensor(rng.uniform(-2.0, 0.0, 6)))
    pose = Pose.identity()
    upstream = torch.tensor(rng.normal(size=(small_camera.height, small_camera.width, 3)))
    grads = rasterize_backward(cloud, pose, small_camera, upstream)

    def loss(c):
        with torch.no_grad():
            return float((rasterize_tensor(c, pose, small_camera).image * upstream).sum())

    eps = 1e-6
    for name in PARAMETER_NAMES:
        base = getattr(cloud, name)
        for k in rng.choice(base.numel(), 6, replace=False):
            plus, minus = base.clone(), base.clone()
            plus.view(-1)[k] += eps
            minus.view(-1)[k] -= eps
            numeric = (loss(cloud.replace(**{name: plus})) - loss(cloud.replace(**{name: minus}))) / (2 * eps)
            analytic = float(grads[name].reshape(-1)[k])
            assert abs(analytic - numeric) <= 1e-6 + 1e-4 * abs(numeric), (name, k, analytic, numeric)
