"""Gaussian cloud container and initialization from the sparse model."""
import logging
from dataclasses import dataclass
from typing import Dict

import numpy as np
import torch
from scipy.spatial import cKDTree

from hybrid_pad.core.errors import ReconstructionError
from hybrid_pad.core.sfm.sparse_model import SparseModel
from hybrid_pad.core.splatting.sh import SH_C0

logger = logging.getLogger(__name__)

PARAMETER_NAMES = ("means", "quats", "log_scales", "opacity_logits", "sh")
INITIAL_OPACITY = 0.1
MAX_SH_COEFFS = 16


@dataclass(eq=False)
class GaussianCloud:
    """Flat per-field tensors for N Gaussians.

    means (N, 3), quats (N, 4) as (w, x, y, z), log_scales (N, 3), opacity_logits (N,),
    sh (N, 16, 3). Only the first (active_sh_degree + 1)^2 coefficients are evaluated.
    """

    means: torch.Tensor
    quats: torch.Tensor
    log_scales: torch.Tensor
    opacity_logits: torch.Tensor
    sh: torch.Tensor
    sh_degree: int = 3
    active_sh_degree: int = 3

    def __post_init__(self) -> None:
        n = self.means.shape[0]
        shapes = {
            "means": (n, 3),
            "quats": (n, 4),
            "log_scales": (n, 3),
            "opacity_logits": (n,),
            "sh": (n, MAX_SH_COEFFS, 3),
        }
        for name, shape in shapes.items():
            if tuple(getattr(self, name).shape) != shape:
                raise ValueError(f"{name} has shape {tuple(getattr(self, name).shape)}, expected {shape}")
        if not 0 <= self.active_sh_degree <= self.sh_degree <= 3:
            raise ValueError(f"Invalid SH degrees: active {self.active_sh_degree}, max {self.sh_degree}")

    def __len__(self) -> int:
        return self.means.shape[0]

    @property
    def count(self) -> int:
        return len(self)

    @property
    def dtype(self) -> torch.dtype:
        return self.means.dtype

    @property
    def opacities(self) -> torch.Tensor:
        return torch.sigmoid(self.opacity_logits)

    @property
    def scales(self) -> torch.Tensor:
        return torch.exp(self.log_scales)

    def parameters(self) -> Dict[str, torch.Tensor]:
        return {name: getattr(self, name) for name in PARAMETER_NAMES}

    def replace(self, **tensors: torch.Tensor) -> "GaussianCloud":
        fields = self.parameters()
        fields.update(tensors)
        return GaussianCloud(**fields, sh_degree=self.sh_degree, active_sh_degree=self.active_sh_degree)

    def detach(self) -> "GaussianCloud":
        return self.replace(**{k: v.detach().clone() for k, v in self.parameters().items()})

    def to(self, dtype: torch.dtype) -> "GaussianCloud":
        return self.replace(**{k: v.detach().to(dtype) for k, v in self.parameters().items()})

    def requires_grad_(self) -> "GaussianCloud":
        for tensor in self.parameters().values():
            tensor.requires_grad_(True)
        return self

    def index(self, idx: torch.Tensor) -> "GaussianCloud":
        return self.replace(**{k: v[idx] for k, v in self.parameters().items()})

    def equals(self, other: "GaussianCloud") -> bool:
        return (
            len(self) == len(other)
            and self.active_sh_degree == other.active_sh_degree
            and all(torch.equal(a, b) for a, b in zip(self.parameters().values(), other.parameters().values()))
        )

    @classmethod
    def empty(cls, sh_degree: int = 3, dtype: torch.dtype = torch.float32) -> "GaussianCloud":
        return cls(
            torch.zeros((0, 3), dtype=dtype),
            torch.zeros((0, 4), dtype=dtype),
            torch.zeros((0, 3), dtype=dtype),
            torch.zeros((0,), dtype=dtype),
            torch.zeros((0, MAX_SH_COEFFS, 3), dtype=dtype),
            sh_degree=sh_degree,
            active_sh_degree=sh_degree,
        )


def rgb_to_sh_dc(rgb: np.ndarray) -> np.ndarray:
    """Degree-0 coefficient that evaluates to `rgb` (in [0, 1])."""
    return (rgb - 0.5) / SH_C0


def nearest_neighbour_scale(xyz: np.ndarray, k: int = 3) -> np.ndarray:
    """Mean distance to the k nearest other points (fallback 0.01 for a lone point)."""
    n = len(xyz)
    if n < 2:
        return np.full(n, 0.01)
    k = min(k, n - 1)
    dist, _ = cKDTree(xyz).query(xyz, k=k + 1)
    mean = dist[:, 1:].mean(axis=1)
    return np.sqrt(np.maximum(mean**2, 1e-7))


def init_from_sparse(
    model: SparseModel, sh_degree: int = 3, dtype: torch.dtype = torch.float32
) -> GaussianCloud:
    """One Gaussian per sparse point: isotropic kNN scale, opacity 0.1, identity rotation, DC color."""
    if len(model) == 0:
        raise ReconstructionError("Cannot initialize Gaussians from an empty sparse model")
    n = len(model)
    xyz = model.xyz.astype(np.float64)
    scales = nearest_neighbour_scale(xyz)
    sh = np.zeros((n, MAX_SH_COEFFS, 3))
    sh[:, 0, :] = rgb_to_sh_dc(model.rgb.astype(np.float64) / 255.0)
    quats = np.zeros((n, 4))
    quats[:, 0] = 1.0
    logit = np.log(INITIAL_OPACITY / (1.0 - INITIAL_OPACITY))
    cloud = GaussianCloud(
        means=torch.as_tensor(xyz, dtype=dtype),
        quats=torch.as_tensor(quats, dtype=dtype),
        log_scales=torch.as_tensor(np.log(scales)[:, None].repeat(3, axis=1), dtype=dtype),
        opacity_logits=torch.full((n,), logit, dtype=dtype),
        sh=torch.as_tensor(sh, dtype=dtype),
        sh_degree=sh_degree,
        active_sh_degree=0,
    )
    logger.info(f"Initialized {n} Gaussians (median scale {np.median(scales):.4f})")
    return cloud
