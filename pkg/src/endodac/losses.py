"""Self-supervised objective: SSIM+L1 photometric term, edge-aware smoothness,
multi-scale / multi-source aggregation with in-bounds masking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch
import torch.nn.functional as F

from .depth_net import DisparityPyramid, disp_to_depth
from .errors import DimensionError, NumericAbort
from .geometry import synthesize
from .pose_intrinsics import RelativePose

_SSIM_C1 = 0.01 ** 2
_SSIM_C2 = 0.03 ** 2

# Optional lighting-compensation hook: (reconstruction, target) -> (reconstruction,
# target), applied before the photometric term. Default None means identity; the
# flow-based compensation networks some pipelines use can be plugged in here.
PreLossHook = Callable[[torch.Tensor, torch.Tensor], tuple[torch.Tensor, torch.Tensor]]


@dataclass
class LossConfig:
    alpha: float = 0.85
    smoothness_weight: float = 1e-3
    scales: int = 4
    min_reprojection: bool = True
    min_depth: float = 0.1
    max_depth: float = 100.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.smoothness_weight < 0:
            raise ValueError(f"smoothness_weight must be >= 0, got {self.smoothness_weight}")


def ssim(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Per-pixel SSIM map in [-1, 1] from 3x3 local statistics.

    Reflection padding keeps constant images constant, so the closed form for
    constant inputs holds at the borders too. Symmetric in (a, b).
    """
    if a.shape != b.shape:
        raise DimensionError(f"ssim inputs differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")
    pad = torch.nn.ReflectionPad2d(1)
    pool = torch.nn.AvgPool2d(3, 1)
    a, b = pad(a), pad(b)
    mu_a = pool(a)
    mu_b = pool(b)
    sigma_a = pool(a * a) - mu_a ** 2
    sigma_b = pool(b * b) - mu_b ** 2
    sigma_ab = pool(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + _SSIM_C1) * (2 * sigma_ab + _SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + _SSIM_C1) * (sigma_a + sigma_b + _SSIM_C2)
    return num / den


def photometric_loss(target: torch.Tensor, reconstructed: torch.Tensor,
                     alpha: float = 0.85) -> torch.Tensor:
    """alpha * (1 - SSIM)/2 + (1 - alpha) * |target - reconstructed|, channel-averaged.

    Returns a (B, 1, H, W) per-pixel loss map.
    """
    if target.shape != reconstructed.shape:
        raise DimensionError(
            f"photometric inputs differ in shape: {tuple(target.shape)} vs {tuple(reconstructed.shape)}"
        )
    l1 = (target - reconstructed).abs().mean(dim=1, keepdim=True)
    ssim_term = (1.0 - ssim(target, reconstructed).mean(dim=1, keepdim=True)) / 2.0
    return alpha * ssim_term + (1.0 - alpha) * l1


def edge_aware_smoothness(disp: torch.Tensor, image: torch.Tensor) -> torch.Tensor:
    """Mean of |dx d| e^{-|dx I|} + |dy d| e^{-|dy I|} with d the mean-normalized disparity.

    Mean normalization makes the result invariant to positive rescaling of the
    disparity. Image gradients are channel-averaged inside the exponent.
    """
    mean_disp = disp.mean(dim=(2, 3), keepdim=True)
    if (mean_disp.abs() < 1e-12).any():
        raise NumericAbort("disparity mean is zero; cannot mean-normalize for smoothness")
    d = disp / mean_disp
    total = disp.sum() * 0.0
    if disp.shape[-1] >= 2:
        grad_d_x = (d[:, :, :, :-1] - d[:, :, :, 1:]).abs()
        grad_i_x = (image[:, :, :, :-1] - image[:, :, :, 1:]).abs().mean(dim=1, keepdim=True)
        total = total + (grad_d_x * torch.exp(-grad_i_x)).mean()
    if disp.shape[-2] >= 2:
        grad_d_y = (d[:, :, :-1, :] - d[:, :, 1:, :]).abs()
        grad_i_y = (image[:, :, :-1, :] - image[:, :, 1:, :]).abs().mean(dim=1, keepdim=True)
        total = total + (grad_d_y * torch.exp(-grad_i_y)).mean()
    return total


@dataclass
class LossDiagnostics:
    total: float
    photometric: float
    smoothness: float
    scale_photometric: list = field(default_factory=list)
    scale_smoothness: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "total": self.total,
            "photometric": self.photometric,
            "smoothness": self.smoothness,
            "scale_photometric": list(self.scale_photometric),
            "scale_smoothness": list(self.scale_smoothness),
        }


def _photometric_terms(target, sources, depth, k, poses, alpha, min_reprojection,
                       pre_loss_hook):
    """Loss term plus the in-bounds diagnostic for one scale.

    The optimized term averages over every pixel: out-of-range reprojections
    sample border-clamped content and keep contributing error, so shoving
    pixels off the image (e.g. by inflating the predicted intrinsics) cannot
    empty the loss. The reported photometric component is the conventional
    in-bounds mean.
    """
    maps, valids = [], []
    for src, pose in zip(sources, poses):
        rot = pose.rotation_matrix()
        recon, valid = synthesize(src, depth, k, rot, pose.translation)
        if pre_loss_hook is not None:
            recon, tgt = pre_loss_hook(recon, target)
        else:
            tgt = target
        maps.append(photometric_loss(tgt, recon, alpha))
        valids.append(valid)
    stacked = torch.cat(maps, dim=1)          # (B, S, H, W)
    valid = torch.cat(valids, dim=1)
    if min_reprojection:
        combined, _ = stacked.min(dim=1, keepdim=True)
        big = torch.full_like(stacked, torch.finfo(stacked.dtype).max)
        masked, _ = torch.where(valid, stacked, big).min(dim=1, keepdim=True)
        any_valid = valid.any(dim=1, keepdim=True)
    else:
        combined = stacked.mean(dim=1, keepdim=True)
        masked = stacked
        any_valid = valid
    loss = combined.mean()
    count = any_valid.sum()
    if count == 0:
        diagnostic = loss.detach() * 0.0
    else:
        diagnostic = ((masked * any_valid).sum() / count).detach()
    return loss, diagnostic


def total_loss(target: torch.Tensor, sources: Sequence[torch.Tensor],
               pyramid: DisparityPyramid, poses: Sequence[RelativePose],
               k: torch.Tensor, config: LossConfig,
               pre_loss_hook: PreLossHook | None = None,
               ) -> tuple[torch.Tensor, LossDiagnostics]:
    """Full objective over the disparity pyramid and both adjacent sources.

    Per scale: the disparity is upsampled to full resolution, converted to
    depth, and each source is view-synthesized; per-pixel photometric maps are
    reduced with a per-pixel minimum over sources (when enabled) and averaged
    over all pixels (see _photometric_terms for why masking the average would
    be degenerate; the diagnostics report the in-bounds mean). Smoothness is
    evaluated at the scale's native resolution with weight
    smoothness_weight / 2^scale. Scales are averaged.
    """
    if len(sources) != len(poses):
        raise DimensionError(f"{len(sources)} sources but {len(poses)} poses")
    full_hw = target.shape[-2:]
    n_scales = min(config.scales, len(pyramid.maps))
    photo_terms, photo_diags, smooth_terms = [], [], []
    for scale in range(n_scales):
        disp = pyramid.maps[scale]
        disp_full = disp if disp.shape[-2:] == full_hw else F.interpolate(
            disp, size=full_hw, mode="bilinear", align_corners=False)
        depth = disp_to_depth(disp_full, config.min_depth, config.max_depth)
        photo, photo_diag = _photometric_terms(target, sources, depth, k, poses,
                                               config.alpha,
                                               config.min_reprojection,
                                               pre_loss_hook)
        image_s = target if disp.shape[-2:] == full_hw else F.interpolate(
            target, size=disp.shape[-2:], mode="area")
        smooth = edge_aware_smoothness(disp, image_s)
        photo_terms.append(photo)
        photo_diags.append(photo_diag)
        smooth_terms.append(config.smoothness_weight / (2 ** scale) * smooth)
    total = (sum(photo_terms) + sum(smooth_terms)) / n_scales
    diag = LossDiagnostics(
        total=float(total.detach()),
        photometric=float(sum(photo_diags) / n_scales),
        smoothness=float(sum(t.detach() for t in smooth_terms) / n_scales),
        scale_photometric=[float(t) for t in photo_diags],
        scale_smoothness=[float(t.detach()) for t in smooth_terms],
    )
    return total, diag
