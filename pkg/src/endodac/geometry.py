"""Differentiable pinhole geometry: backprojection, rigid reprojection, warping.

Conventions: images are (B, C, H, W); the center of pixel (row i, col j) has
coordinates (u, v) = (j, i). Points in camera space are homogeneous 4-vectors
laid out as (B, 4, H, W). All ops are pure tensor functions and keep whatever
dtype they are given, so float64 gradient checks work unchanged.
"""

from __future__ import annotations

from typing import NamedTuple

import torch
import torch.nn.functional as F

from .errors import DimensionError

# Transformed depths are clamped here before the perspective division so that
# points at or behind the camera plane cannot blow up the grid; such pixels are
# excluded from losses via the validity mask instead.
MIN_PROJECT_DEPTH = 1e-6

# In-bounds test tolerance (pixels): coordinates this close to the border are
# border-clamped by warp anyway, so float roundoff must not invalidate them.
_BOUNDS_EPS = 1e-3


class Projection(NamedTuple):
    grid: torch.Tensor   # (B, H, W, 2) continuous source-pixel coordinates (u, v)
    depth: torch.Tensor  # (B, 1, H, W) transformed depth z'
    valid: torch.Tensor  # (B, 1, H, W) bool: in front of camera and inside the image


def pixel_grid(height: int, width: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """Homogeneous pixel coordinates (u, v, 1), shape (3, H, W)."""
    v, u = torch.meshgrid(
        torch.arange(height, dtype=dtype, device=device),
        torch.arange(width, dtype=dtype, device=device),
        indexing="ij",
    )
    return torch.stack([u, v, torch.ones_like(u)], dim=0)


def _as_batched_mat(m: torch.Tensor, batch: int) -> torch.Tensor:
    if m.dim() == 2:
        return m.unsqueeze(0).expand(batch, *m.shape)
    if m.dim() == 3:
        return m
    raise DimensionError(f"expected a 2-D or batched 3-D matrix, got shape {tuple(m.shape)}")


def backproject(depth: torch.Tensor, k_inv: torch.Tensor) -> torch.Tensor:
    """Lift a depth map to homogeneous camera-space points.

    point(u, v) = depth(u, v) * K^-1 (u, v, 1)^T, returned as (B, 4, H, W)
    with the fourth row fixed at 1.
    """
    if depth.dim() != 4 or depth.shape[1] != 1:
        raise DimensionError(f"depth must be (B, 1, H, W), got {tuple(depth.shape)}")
    b, _, h, w = depth.shape
    k_inv = _as_batched_mat(k_inv, b)
    rays = pixel_grid(h, w, dtype=depth.dtype, device=depth.device).reshape(3, -1)
    cam = torch.matmul(k_inv, rays.unsqueeze(0)) * depth.reshape(b, 1, -1)
    ones = torch.ones(b, 1, h * w, dtype=depth.dtype, device=depth.device)
    return torch.cat([cam, ones], dim=1).reshape(b, 4, h, w)


def project(points: torch.Tensor, k: torch.Tensor, rot: torch.Tensor,
            trans: torch.Tensor) -> Projection:
    """Rigidly move camera points and project them through K.

    q = K (R p + t); the grid holds (q_x / z', q_y / z') with z' = q_z clamped
    below at MIN_PROJECT_DEPTH. Out-of-range pixels (behind the camera or
    projecting outside the image) are flagged in the valid mask.
    """
    if points.dim() != 4 or points.shape[1] != 4:
        raise DimensionError(f"points must be (B, 4, H, W), got {tuple(points.shape)}")
    b, _, h, w = points.shape
    k = _as_batched_mat(k, b)
    rot = _as_batched_mat(rot, b)
    if trans.dim() == 1:
        trans = trans.unsqueeze(0).expand(b, 3)
    xyz = points[:, :3].reshape(b, 3, -1)
    moved = torch.matmul(rot, xyz) + trans.reshape(b, 3, 1)
    q = torch.matmul(k, moved)
    z = q[:, 2:3].clamp(min=MIN_PROJECT_DEPTH)
    uv = q[:, :2] / z
    grid = uv.reshape(b, 2, h, w).permute(0, 2, 3, 1)
    depth = z.reshape(b, 1, h, w)
    in_front = q[:, 2:3].reshape(b, 1, h, w) > MIN_PROJECT_DEPTH
    in_bounds = (
        (grid[..., 0] >= -_BOUNDS_EPS) & (grid[..., 0] <= w - 1 + _BOUNDS_EPS)
        & (grid[..., 1] >= -_BOUNDS_EPS) & (grid[..., 1] <= h - 1 + _BOUNDS_EPS)
    ).unsqueeze(1)
    return Projection(grid=grid, depth=depth, valid=in_front & in_bounds)


def warp(source: torch.Tensor, grid: torch.Tensor) -> torch.Tensor:
    """Bilinearly sample `source` at continuous pixel coordinates.

    Coordinates outside the image clamp to the border, so a coordinate of
    (-5, -5) reads the (0, 0) pixel. Differentiable in both source and grid.
    """
    if source.dim() != 4:
        raise DimensionError(f"source must be (B, C, H, W), got {tuple(source.shape)}")
    if grid.dim() != 4 or grid.shape[-1] != 2:
        raise DimensionError(f"grid must be (B, H, W, 2), got {tuple(grid.shape)}")
    if not torch.isfinite(grid).all():
        raise DimensionError("sampling grid contains non-finite coordinates")
    _, _, h, w = source.shape
    # grid_sample wants coordinates normalized to [-1, 1] at pixel centers
    gx = 2.0 * grid[..., 0] / max(w - 1, 1) - 1.0
    gy = 2.0 * grid[..., 1] / max(h - 1, 1) - 1.0
    norm = torch.stack([gx, gy], dim=-1)
    return F.grid_sample(source, norm, mode="bilinear", padding_mode="border",
                         align_corners=True)


def synthesize(source: torch.Tensor, depth: torch.Tensor, k: torch.Tensor,
               rot: torch.Tensor, trans: torch.Tensor,
               k_inv: torch.Tensor | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Reconstruct the target view by sampling `source` through depth + motion.

    Composition of backproject -> project -> warp. Returns the reconstruction
    and the per-pixel validity mask from the projection step.
    """
    if k_inv is None:
        k_inv = torch.linalg.inv(_as_batched_mat(k, depth.shape[0]))
    points = backproject(depth, k_inv)
    proj = project(points, k, rot, trans)
    return warp(source, proj.grid), proj.valid
