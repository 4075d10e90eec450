"""Binary PLY in the common splat layout (x, y, z, normals, f_dc, f_rest, opacity, scale, rot)."""
from pathlib import Path
from typing import List, Union

import numpy as np
import torch
from plyfile import PlyData, PlyElement, PlyParseError

from hybrid_pad.core.errors import BundleFormatError
from hybrid_pad.core.splatting.gaussians import MAX_SH_COEFFS, GaussianCloud

REST_COEFFS = MAX_SH_COEFFS - 1


def ply_attributes() -> List[str]:
    names = ["x", "y", "z", "nx", "ny", "nz"]
    names += [f"f_dc_{i}" for i in range(3)]
    names += [f"f_rest_{i}" for i in range(3 * REST_COEFFS)]
    names += ["opacity"]
    names += [f"scale_{i}" for i in range(3)]
    names += [f"rot_{i}" for i in range(4)]
    return names


def save_ply(cloud: GaussianCloud, path: Union[str, Path]) -> None:
    """f_rest_{c*15+k} holds coefficient k+1 of channel c."""
    params = {k: v.detach().to(torch.float64).numpy() for k, v in cloud.parameters().items()}
    n = len(cloud)
    xyz = params["means"]
    f_dc = params["sh"][:, 0, :]
    f_rest = params["sh"][:, 1:, :].transpose(0, 2, 1).reshape(n, -1)
    columns = np.concatenate(
        [
            xyz,
            np.zeros_like(xyz),
            f_dc,
            f_rest,
            params["opacity_logits"][:, None],
            params["log_scales"],
            params["quats"],
        ],
        axis=1,
    ).astype(np.float32)
    elements = np.empty(n, dtype=[(name, "f4") for name in ply_attributes()])
    for i, name in enumerate(ply_attributes()):
        elements[name] = columns[:, i]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    PlyData([PlyElement.describe(elements, "vertex")]).write(str(path))


def load_ply(
    path: Union[str, Path], sh_degree: int = 3, active_sh_degree: int = 3, dtype: torch.dtype = torch.float32
) -> GaussianCloud:
    path = Path(path)
    if not path.exists():
        raise BundleFormatError("Gaussian PLY not found", path)
    try:
        vertex = PlyData.read(str(path))["vertex"]
        columns = {name: np.asarray(vertex[name], dtype=np.float64) for name in ply_attributes()}
    except (KeyError, ValueError, OSError, PlyParseError) as e:
        raise BundleFormatError(f"Malformed Gaussian PLY ({e})", path) from e

    n = len(columns["x"])
    sh = np.zeros((n, MAX_SH_COEFFS, 3))
    sh[:, 0, :] = np.stack([columns[f"f_dc_{i}"] for i in range(3)], axis=1)
    rest = np.stack([columns[f"f_rest_{i}"] for i in range(3 * REST_COEFFS)], axis=1)
    sh[:, 1:, :] = rest.reshape(n, 3, REST_COEFFS).transpose(0, 2, 1)

    def stack(prefix: str, count: int) -> torch.Tensor:
        return torch.as_tensor(np.stack([columns[f"{prefix}{i}"] for i in range(count)], axis=1), dtype=dtype)

    return GaussianCloud(
        means=torch.as_tensor(np.stack([columns["x"], columns["y"], columns["z"]], axis=1), dtype=dtype),
        quats=stack("rot_", 4),
        log_scales=stack("scale_", 3),
        opacity_logits=torch.as_tensor(columns["opacity"], dtype=dtype),
        sh=torch.as_tensor(sh, dtype=dtype),
        sh_degree=sh_degree,
        active_sh_degree=active_sh_degree,
    )
