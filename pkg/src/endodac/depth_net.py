"""Dense-prediction decoder with frozen reassemble/fusion stages and trainable
multi-scale disparity heads, plus the DepthNet assembly."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, DimensionError
from .vit_adapter import AdaptedEncoder, EncoderConfig, TokenFeatureSet


@dataclass
class DecoderConfig:
    embed_dim: int = 768
    level_channels: tuple[int, int, int, int] = (96, 192, 384, 768)
    fusion_channels: int = 160
    head_channels: int = 32

    def __post_init__(self):
        if len(self.level_channels) != 4:
            raise ConfigError("decoder needs exactly 4 level channel counts")


@dataclass
class DisparityPyramid:
    """Sigmoid disparity maps at scales {1, 1/2, 1/4, 1/8} of input resolution.

    maps[s] has shape (B, 1, H / 2^s, W / 2^s); every value lies in (0, 1).
    """

    maps: tuple[torch.Tensor, ...]

    def __post_init__(self):
        if len(self.maps) != 4:
            raise ConfigError(f"expected 4 pyramid levels, got {len(self.maps)}")

    @property
    def full_resolution(self) -> torch.Tensor:
        return self.maps[0]


def disp_to_depth(disp: torch.Tensor, min_depth: float, max_depth: float) -> torch.Tensor:
    """Map sigmoid disparity in (0, 1) to depth in [min_depth, max_depth].

    depth = 1 / (1/max + (1/min - 1/max) * disp); monotone decreasing in disp.
    """
    if min_depth <= 0 or max_depth <= min_depth:
        raise ConfigError(
            f"need 0 < min_depth < max_depth, got {min_depth}, {max_depth}")
    scaled = 1.0 / max_depth + (1.0 / min_depth - 1.0 / max_depth) * disp
    return 1.0 / scaled


def count_parameters(module: nn.Module) -> tuple[int, int]:
    """(total, trainable) parameter counts by the requires_grad flag."""
    total = sum(p.numel() for p in module.parameters())
    trainable = sum(p.numel() for p in module.parameters() if p.requires_grad)
    return total, trainable


class _Reassemble(nn.Module):
    """Token grid -> spatial feature at one pyramid level.

    1x1 projection to the level width, spatial resampling by the level factor
    (x4, x2, x1, x1/2 for levels 0..3), then 3x3 projection into fusion width.
    """

    def __init__(self, embed_dim: int, level_ch: int, fusion_ch: int, level: int):
        super().__init__()
        self.project = nn.Conv2d(embed_dim, level_ch, 1)
        if level == 0:
            self.resample = nn.ConvTranspose2d(level_ch, level_ch, 4, stride=4)
        elif level == 1:
            self.resample = nn.ConvTranspose2d(level_ch, level_ch, 2, stride=2)
        elif level == 2:
            self.resample = nn.Identity()
        else:
            self.resample = nn.Conv2d(level_ch, level_ch, 3, stride=2, padding=1)
        self.fuse_in = nn.Conv2d(level_ch, fusion_ch, 3, padding=1)

    def forward(self, x):
        return self.fuse_in(self.resample(self.project(x)))


class _ResidualConvUnit(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        out = self.conv1(F.relu(x))
        out = self.conv2(F.relu(out))
        return out + x


class _FusionBlock(nn.Module):
    """Merge the deeper path with this level's reassembled feature, upsample x2."""

    def __init__(self, channels: int):
        super().__init__()
        self.rcu_skip = _ResidualConvUnit(channels)
        self.rcu_out = _ResidualConvUnit(channels)
        self.out_conv = nn.Conv2d(channels, channels, 1)

    def forward(self, x, skip=None):
        if skip is not None:
            if x.shape[-2:] != skip.shape[-2:]:
                x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear",
                                  align_corners=True)
            x = x + self.rcu_skip(skip)
        x = self.rcu_out(x)
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=True)
        return self.out_conv(x)


class DispHead(nn.Module):
    """conv -> ReLU -> conv -> sigmoid at the scale's exact output resolution.

    The output bias starts negative so initial disparity sits low (~0.15) and
    the corresponding depth lands mid-range with headroom toward both bounds;
    anchoring at sigmoid(0)=0.5 put depth within a factor of two of min_depth,
    where scale-ambiguous training squeezes structure into the clamp.
    """

    def __init__(self, in_channels: int, mid_channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, mid_channels, 3, padding=1)
        self.conv2 = nn.Conv2d(mid_channels, 1, 3, padding=1)
        nn.init.constant_(self.conv2.bias, -1.7)

    def forward(self, x, out_hw):
        if x.shape[-2:] != tuple(out_hw):
            x = F.interpolate(x, size=out_hw, mode="bilinear", align_corners=True)
        return torch.sigmoid(self.conv2(F.relu(self.conv1(x))))


class MultiScaleDecoder(nn.Module):
    """Frozen reassemble + fusion trunk with one trainable head per fusion level."""

    def __init__(self, config: DecoderConfig):
        super().__init__()
        self.config = config
        self.reassembles = nn.ModuleList([
            _Reassemble(config.embed_dim, config.level_channels[i],
                        config.fusion_channels, i)
            for i in range(4)
        ])
        self.fusions = nn.ModuleList([
            _FusionBlock(config.fusion_channels) for _ in range(4)
        ])
        for p in self.parameters():
            p.requires_grad_(False)
        self.heads = nn.ModuleList([
            DispHead(config.fusion_channels, config.head_channels) for _ in range(4)
        ])

    def forward(self, features: TokenFeatureSet, image_size: tuple[int, int]
                ) -> DisparityPyramid:
        if len(features.grids) != 4:
            raise ConfigError(f"decoder needs 4 feature levels, got {len(features.grids)}")
        h, w = image_size
        level_feats = [self.reassembles[i](features.grids[i]) for i in range(4)]
        # coarsest-to-finest fusion; deeper fusion outputs feed shallower levels
        path = self.fusions[3](level_feats[3])
        fused = [path]
        for i in (2, 1, 0):
            path = self.fusions[i](path, level_feats[i])
            fused.append(path)
        # fused[0] is the coarsest path -> scale 3; fused[3] the finest -> scale 0
        maps = []
        for scale in range(4):
            out_hw = (h // 2 ** scale, w // 2 ** scale)
            maps.append(self.heads[scale](fused[3 - scale], out_hw))
        return DisparityPyramid(maps=tuple(maps))


class DepthNet(nn.Module):
    """Adapted ViT encoder + multi-scale decoder."""

    def __init__(self, encoder_config: EncoderConfig, decoder_config: DecoderConfig,
                 seed: int = 0):
        super().__init__()
        if decoder_config.embed_dim != encoder_config.embed_dim:
            raise ConfigError(
                f"decoder embed_dim {decoder_config.embed_dim} != encoder "
                f"embed_dim {encoder_config.embed_dim}")
        self.encoder = AdaptedEncoder(encoder_config, seed=seed)
        self.decoder = MultiScaleDecoder(decoder_config)

    def forward(self, image: torch.Tensor) -> DisparityPyramid:
        features = self.encoder(image)
        return self.decoder(features, tuple(image.shape[-2:]))

    def set_adapter_phase(self, global_step: int, warmup_steps: int) -> None:
        self.encoder.set_adapter_phase(global_step, warmup_steps)

    def adapters(self):
        yield from self.encoder.adapters()

    def trainable_union_count(self) -> int:
        """Trainable parameters counting all four DV-LoRA factors regardless of
        the current phase (adapters + necks + heads)."""
        count = sum(p.numel() for a in self.adapters() for p in a.parameters())
        count += sum(p.numel() for p in self.encoder.necks.parameters())
        count += sum(p.numel() for p in self.decoder.heads.parameters())
        return count
