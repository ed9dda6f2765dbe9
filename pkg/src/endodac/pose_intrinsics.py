"""Joint ego-motion and camera-intrinsics estimation from adjacent frame pairs.

A shared residual conv encoder consumes the two frames concatenated
channel-wise; two small decoders emit a 6-DoF relative pose (axis-angle +
translation, scaled by 0.01 to start near the identity) and normalized pinhole
intrinsics (softplus focals, sigmoid principal point). Both decoder output
layers are zero-initialized, so the initial estimate is exactly the identity
motion with principal point (0.5, 0.5).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, DimensionError

POSE_OUTPUT_SCALE = 0.01

# softplus(FOCAL_PRIOR_SHIFT) = 1: a zero raw output decodes to the unit
# normalized focal, the same kind of neutral prior sigmoid(0) = 0.5 gives the
# principal point. Real cameras cluster around unit normalized focal, and the
# joint calibration starts from a sensible operating point instead of
# softplus(0) = 0.69.
FOCAL_PRIOR_SHIFT = 0.5413248546129181


@dataclass
class CameraIntrinsics:
    """Pinhole intrinsics normalized by image size: focals by width/height,
    principal point to [0, 1]. Values are tensors, scalar or batched (B,)."""

    fx_norm: torch.Tensor
    fy_norm: torch.Tensor
    cx_norm: torch.Tensor
    cy_norm: torch.Tensor

    @classmethod
    def from_values(cls, fx: float, fy: float, cx: float, cy: float,
                    dtype=torch.float32) -> "CameraIntrinsics":
        if fx <= 0 or fy <= 0:
            raise ConfigError(f"focal lengths must be positive, got fx={fx}, fy={fy}")
        if not (0 < cx < 1 and 0 < cy < 1):
            raise ConfigError(f"principal point must lie inside (0, 1), got ({cx}, {cy})")
        t = lambda v: torch.tensor(v, dtype=dtype)
        return cls(t(fx), t(fy), t(cx), t(cy))

    def normalized(self) -> tuple[float, float, float, float]:
        vals = (self.fx_norm, self.fy_norm, self.cx_norm, self.cy_norm)
        return tuple(float(v.detach().mean()) for v in vals)

    def matrix(self, width: int, height: int) -> torch.Tensor:
        return intrinsics_to_matrix(self, width, height)[0]

    def inverse_matrix(self, width: int, height: int) -> torch.Tensor:
        return intrinsics_to_matrix(self, width, height)[1]


@dataclass
class RelativePose:
    """Relative camera motion: axis-angle rotation and translation, (..., 3) each."""

    axis_angle: torch.Tensor
    translation: torch.Tensor

    def rotation_matrix(self) -> torch.Tensor:
        return axis_angle_to_matrix(self.axis_angle)

    def matrix(self) -> torch.Tensor:
        """Homogeneous 4x4 transform(s), shape (..., 4, 4)."""
        rot = self.rotation_matrix()
        batch = rot.shape[:-2]
        out = torch.zeros(*batch, 4, 4, dtype=rot.dtype, device=rot.device)
        out[..., :3, :3] = rot
        out[..., :3, 3] = self.translation
        out[..., 3, 3] = 1.0
        return out


def axis_angle_to_matrix(aa: torch.Tensor) -> torch.Tensor:
    """Rodrigues' formula, batched over leading dims of a (..., 3) input.

    The angle is smoothed as sqrt(|aa|^2 + 1e-24) so gradients stay finite at
    the zero rotation, where the result is exactly the identity.
    """
    if aa.shape[-1] != 3:
        raise DimensionError(f"axis-angle input must end in dim 3, got {tuple(aa.shape)}")
    theta = torch.sqrt((aa * aa).sum(dim=-1, keepdim=True) + 1e-24)
    axis = aa / theta
    x, y, z = axis[..., 0], axis[..., 1], axis[..., 2]
    zero = torch.zeros_like(x)
    k = torch.stack([
        torch.stack([zero, -z, y], dim=-1),
        torch.stack([z, zero, -x], dim=-1),
        torch.stack([-y, x, zero], dim=-1),
    ], dim=-2)
    sin = torch.sin(theta)[..., None]
    cos = torch.cos(theta)[..., None]
    eye = torch.eye(3, dtype=aa.dtype, device=aa.device).expand(k.shape)
    return eye + sin * k + (1.0 - cos) * (k @ k)


def intrinsics_to_matrix(intr: CameraIntrinsics, width: int,
                         height: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Pixel-form K and its analytic inverse.

    K = [[fx_norm*W, 0, cx_norm*W], [0, fy_norm*H, cy_norm*H], [0, 0, 1]].
    Built with stack ops so gradients flow back into predicted intrinsics.
    """
    if width <= 0 or height <= 0:
        raise ConfigError(f"image size must be positive, got {width}x{height}")
    fx = intr.fx_norm * width
    fy = intr.fy_norm * height
    cx = intr.cx_norm * width
    cy = intr.cy_norm * height
    zero = torch.zeros_like(fx)
    one = torch.ones_like(fx)
    k = torch.stack([
        torch.stack([fx, zero, cx], dim=-1),
        torch.stack([zero, fy, cy], dim=-1),
        torch.stack([zero, zero, one], dim=-1),
    ], dim=-2)
    k_inv = torch.stack([
        torch.stack([1.0 / fx, zero, -cx / fx], dim=-1),
        torch.stack([zero, 1.0 / fy, -cy / fy], dim=-1),
        torch.stack([zero, zero, one], dim=-1),
    ], dim=-2)
    return k, k_inv


class _BasicBlock(nn.Module):
    def __init__(self, in_ch, out_ch, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.down = None
        if stride != 1 or in_ch != out_ch:
            self.down = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch),
            )

    def forward(self, x):
        identity = x if self.down is None else self.down(x)
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + identity)


class PairEncoder(nn.Module):
    """18-layer residual encoder over a 6-channel frame pair."""

    def __init__(self, base_width: int = 64, in_channels: int = 6):
        super().__init__()
        w = base_width
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, w, 7, stride=2, padding=3, bias=False),
            nn.BatchNorm2d(w),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(3, stride=2, padding=1),
        )
        self.layer1 = nn.Sequential(_BasicBlock(w, w), _BasicBlock(w, w))
        self.layer2 = nn.Sequential(_BasicBlock(w, 2 * w, 2), _BasicBlock(2 * w, 2 * w))
        self.layer3 = nn.Sequential(_BasicBlock(2 * w, 4 * w, 2), _BasicBlock(4 * w, 4 * w))
        self.layer4 = nn.Sequential(_BasicBlock(4 * w, 8 * w, 2), _BasicBlock(8 * w, 8 * w))
        self.out_channels = 8 * w

    def forward(self, x):
        return self.layer4(self.layer3(self.layer2(self.layer1(self.stem(x)))))


class PoseIntrinsicsNet(nn.Module):
    """Shared encoder, separate pose and intrinsics decoders."""

    def __init__(self, base_width: int = 64, decoder_channels: int = 256):
        super().__init__()
        self.encoder = PairEncoder(base_width)
        c = self.encoder.out_channels
        d = decoder_channels
        self.pose_squeeze = nn.Conv2d(c, d, 1)
        self.pose_conv1 = nn.Conv2d(d, d, 3, padding=1)
        self.pose_conv2 = nn.Conv2d(d, d, 3, padding=1)
        self.pose_out = nn.Conv2d(d, 6, 1)
        self.intr_squeeze = nn.Conv2d(c, d, 1)
        self.intr_conv = nn.Conv2d(d, d, 3, padding=1)
        self.intr_out = nn.Conv2d(d, 4, 1)
        # zero-init both output layers: identity pose, (0.5, 0.5) principal point
        nn.init.zeros_(self.pose_out.weight)
        nn.init.zeros_(self.pose_out.bias)
        nn.init.zeros_(self.intr_out.weight)
        nn.init.zeros_(self.intr_out.bias)

    def intrinsics_parameters(self):
        for m in (self.intr_squeeze, self.intr_conv, self.intr_out):
            yield from m.parameters()

    def _decode_pose(self, feat: torch.Tensor) -> RelativePose:
        x = F.relu(self.pose_squeeze(feat))
        x = F.relu(self.pose_conv1(x))
        x = F.relu(self.pose_conv2(x))
        x = self.pose_out(x).mean(dim=(2, 3)) * POSE_OUTPUT_SCALE
        return RelativePose(axis_angle=x[:, :3], translation=x[:, 3:])

    def _decode_intrinsics(self, feat: torch.Tensor) -> CameraIntrinsics:
        x = F.relu(self.intr_squeeze(feat))
        x = F.relu(self.intr_conv(x))
        raw = self.intr_out(x).mean(dim=(2, 3))
        return CameraIntrinsics(
            fx_norm=F.softplus(raw[:, 0] + FOCAL_PRIOR_SHIFT),
            fy_norm=F.softplus(raw[:, 1] + FOCAL_PRIOR_SHIFT),
            cx_norm=torch.sigmoid(raw[:, 2]),
            cy_norm=torch.sigmoid(raw[:, 3]),
        )

    def forward(self, frame_a: torch.Tensor, frame_b: torch.Tensor,
                estimate_intrinsics: bool = True
                ) -> tuple[RelativePose, CameraIntrinsics | None]:
        """Relative pose mapping frame-b camera points into frame a, plus intrinsics.

        With estimate_intrinsics=False the intrinsics decoder is never touched,
        so no gradient can reach it (known-intrinsics mode).
        """
        if frame_a.shape != frame_b.shape:
            raise DimensionError(
                f"frame pair resolution mismatch: {tuple(frame_a.shape)} vs {tuple(frame_b.shape)}"
            )
        feat = self.encoder(torch.cat([frame_a, frame_b], dim=1))
        pose = self._decode_pose(feat)
        intr = self._decode_intrinsics(feat) if estimate_intrinsics else None
        return pose, intr
