"""Tile-based front-to-back alpha compositing of projected splats.

Splats are binned into square tiles and sorted by depth inside each tile. Every tile is
padded to the same list length with a zero-opacity placeholder so the whole frame (or a
chunk of tiles) is composited as one batched tensor expression. Gradients come from
autograd through that expression.
"""
import logging
from dataclasses import dataclass
from typing import Dict, Optional, Sequence

import numpy as np
import torch

from hybrid_pad.core.splatting.gaussians import PARAMETER_NAMES, GaussianCloud
from hybrid_pad.core.splatting.projection import Projection, project_gaussians
from hybrid_pad.core.types import CameraModel, ImageBuffer, Pose

logger = logging.getLogger(__name__)

TILE_SIZE = 16
MAX_ALPHA = 0.99
MIN_TRANSMITTANCE = 1e-4
# Upper bound on tiles x pixels x list length evaluated in one batch
CHUNK_ELEMENTS = 1 << 22


@dataclass
class RenderOutput:
    image: torch.Tensor
    transmittance: torch.Tensor
    means2d: torch.Tensor
    visible: torch.Tensor
    projection: Projection


@dataclass
class TileBins:
    tiles_x: int
    tiles_y: int
    index: torch.Tensor  # (n_tiles, max_len) into the padded splat arrays, depth-sorted


def bin_splats(proj: Projection, cam: CameraModel, tile_size: int = TILE_SIZE) -> TileBins:
    """Per-tile depth-sorted splat lists, padded with index N (the placeholder)."""
    n = proj.means2d.shape[0]
    tiles_x = -(-cam.width // tile_size)
    tiles_y = -(-cam.height // tile_size)
    n_tiles = tiles_x * tiles_y

    visible = proj.visible.numpy()
    ids = np.flatnonzero(visible)
    means = proj.means2d.detach().numpy()[ids].astype(np.float64)
    radii = proj.radii.numpy()[ids].astype(np.float64)
    depths = proj.depths.detach().numpy()[ids].astype(np.float64)

    x0 = np.clip(np.floor(means[:, 0] - radii[:, 0]), 0, cam.width - 1).astype(np.int64) // tile_size
    x1 = np.clip(np.ceil(means[:, 0] + radii[:, 0]), 0, cam.width - 1).astype(np.int64) // tile_size
    y0 = np.clip(np.floor(means[:, 1] - radii[:, 1]), 0, cam.height - 1).astype(np.int64) // tile_size
    y1 = np.clip(np.ceil(means[:, 1] + radii[:, 1]), 0, cam.height - 1).astype(np.int64) // tile_size
    nx = x1 - x0 + 1
    ny = y1 - y0 + 1
    counts = nx * ny

    owner = np.repeat(np.arange(len(ids)), counts)
    local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    tile_x = x0[owner] + local % nx[owner]
    tile_y = y0[owner] + local // nx[owner]
    tile = tile_y * tiles_x + tile_x

    order = np.lexsort((ids[owner], depths[owner], tile))
    tile = tile[order]
    splat = ids[owner][order]

    per_tile = np.bincount(tile, minlength=n_tiles)
    max_len = max(int(per_tile.max()) if len(per_tile) else 0, 1)
    starts = np.cumsum(per_tile) - per_tile
    slot = np.arange(len(tile)) - starts[tile]
    index = np.full((n_tiles, max_len), n, dtype=np.int64)
    index[tile, slot] = splat
    return TileBins(tiles_x, tiles_y, torch.from_numpy(index))


def _tile_pixels(bins: TileBins, tile_size: int, dtype: torch.dtype) -> torch.Tensor:
    """(n_tiles, tile_size^2, 2) pixel-center coordinates (x, y) of every tile."""
    offs = torch.arange(tile_size, dtype=dtype)
    py, px = torch.meshgrid(offs, offs, indexing="ij")
    local = torch.stack([px.reshape(-1), py.reshape(-1)], dim=-1)
    ty, tx = torch.meshgrid(
        torch.arange(bins.tiles_y, dtype=dtype), torch.arange(bins.tiles_x, dtype=dtype), indexing="ij"
    )
    origin = torch.stack([tx.reshape(-1), ty.reshape(-1)], dim=-1) * tile_size
    return origin[:, None, :] + local[None, :, :]


def _composite(
    pixels: torch.Tensor,
    index: torch.Tensor,
    means2d: torch.Tensor,
    conics: torch.Tensor,
    alpha: torch.Tensor,
    rgb: torch.Tensor,
    background: torch.Tensor,
):
    mean = means2d[index]  # (T, L, 2)
    conic = conics[index]  # (T, L, 3)
    dx = pixels[:, :, None, 0] - mean[:, None, :, 0]
    dy = pixels[:, :, None, 1] - mean[:, None, :, 1]
    power = -0.5 * (conic[:, None, :, 0] * dx * dx + conic[:, None, :, 2] * dy * dy) - conic[
        :, None, :, 1
    ] * dx * dy
    a = torch.clamp_max(alpha[index][:, None, :] * torch.exp(torch.clamp_max(power, 0.0)), MAX_ALPHA)

    # A splat is kept only while transmittance after it stays above the floor; the kept set is a prefix.
    with torch.no_grad():
        keep = torch.cumprod(1.0 - a, dim=-1) >= MIN_TRANSMITTANCE
    a = a * keep
    one_minus = 1.0 - a
    trans_after = torch.cumprod(one_minus, dim=-1)
    trans_before = torch.cat([torch.ones_like(trans_after[..., :1]), trans_after[..., :-1]], dim=-1)
    weights = a * trans_before
    color = torch.einsum("tpl,tlc->tpc", weights, rgb[index])
    final = trans_after[..., -1]
    color = color + final[..., None] * background
    return color, final


def rasterize_tensor(
    cloud: GaussianCloud,
    pose: Pose,
    cam: CameraModel,
    background: Sequence[float] = (1.0, 1.0, 1.0),
    tile_size: int = TILE_SIZE,
) -> RenderOutput:
    """Differentiable render: (H, W, 3) image and (H, W) final transmittance."""
    dtype = cloud.dtype
    bg = torch.as_tensor(list(background), dtype=dtype)
    proj = project_gaussians(cloud, pose, cam)
    if proj.means2d.requires_grad:
        proj.means2d.retain_grad()

    pad = lambda x: torch.cat([x, torch.zeros_like(x[:1])], dim=0)  # noqa: E731
    means2d = pad(proj.means2d)
    conics = pad(proj.conics)
    alpha = pad(proj.alpha)
    rgb = pad(proj.rgb)

    bins = bin_splats(proj, cam, tile_size)
    pixels = _tile_pixels(bins, tile_size, dtype)
    n_tiles, max_len = bins.index.shape
    chunk = max(1, CHUNK_ELEMENTS // (tile_size * tile_size * max_len))
    colors, finals = [], []
    for start in range(0, n_tiles, chunk):
        sl = slice(start, start + chunk)
        color, final = _composite(pixels[sl], bins.index[sl], means2d, conics, alpha, rgb, bg)
        colors.append(color)
        finals.append(final)
    color = torch.cat(colors, dim=0)
    final = torch.cat(finals, dim=0)

    def untile(x: torch.Tensor) -> torch.Tensor:
        extra = x.shape[2:]
        x = x.reshape(bins.tiles_y, bins.tiles_x, tile_size, tile_size, *extra)
        x = x.permute(0, 2, 1, 3, *range(4, 4 + len(extra)))
        x = x.reshape(bins.tiles_y * tile_size, bins.tiles_x * tile_size, *extra)
        return x[: cam.height, : cam.width]

    return RenderOutput(
        image=untile(color),
        transmittance=untile(final),
        means2d=proj.means2d,
        visible=proj.visible,
        projection=proj,
    )


def rasterize(
    cloud: GaussianCloud,
    pose: Pose,
    cam: CameraModel,
    background: Sequence[float] = (1.0, 1.0, 1.0),
    tile_size: int = TILE_SIZE,
) -> ImageBuffer:
    with torch.no_grad():
        out = rasterize_tensor(cloud.detach(), pose, cam, background, tile_size)
    image = out.image.clamp(0.0, 1.0).numpy().astype(np.float32)
    return ImageBuffer(image)


def rasterize_backward(
    cloud: GaussianCloud,
    pose: Pose,
    cam: CameraModel,
    upstream: torch.Tensor,
    background: Sequence[float] = (1.0, 1.0, 1.0),
    tile_size: int = TILE_SIZE,
    inputs: Optional[GaussianCloud] = None,
) -> Dict[str, torch.Tensor]:
    """Gradients of sum(upstream * image) with respect to every cloud tensor."""
    leaf = inputs if inputs is not None else cloud.detach().requires_grad_()
    out = rasterize_tensor(leaf, pose, cam, background, tile_size)
    upstream = torch.as_tensor(upstream, dtype=out.image.dtype).reshape(out.image.shape)
    params = [getattr(leaf, name) for name in PARAMETER_NAMES]
    grads = torch.autograd.grad(out.image, params, grad_outputs=upstream, allow_unused=True)
    return {
        name: (g if g is not None else torch.zeros_like(p))
        for name, p, g in zip(PARAMETER_NAMES, params, grads)
    }
