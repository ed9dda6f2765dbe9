"""Frozen ViT encoder wrapped for efficient tuning.

Every transformer block keeps its pre-trained (or randomly initialized) weights
frozen; the two MLP projections get DV-LoRA adapters. Convolutional neck blocks
are inserted after configured block indices to restore high-frequency signal,
and token features are recorded at four tap positions for the decoder. The
whole encoder equals the frozen backbone at initialization: adapters have a
zero residual and the neck's final conv is zero-initialized.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .dvlora import DVLoRAAdapter
from .errors import ConfigError, DimensionError


@dataclass
class EncoderConfig:
    image_size: tuple[int, int] = (224, 224)
    patch_size: int = 14
    embed_dim: int = 768
    depth: int = 12
    num_heads: int = 12
    mlp_ratio: float = 4.0
    lora_rank: int = 4
    neck_positions: tuple[int, ...] = (3, 6, 9, 12)
    neck_channels: int = 18
    feature_tap_positions: tuple[int, ...] = (3, 6, 9, 12)

    def __post_init__(self):
        h, w = self.image_size
        if h % self.patch_size or w % self.patch_size:
            raise ConfigError(
                f"image size {h}x{w} not divisible by patch size {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        for pos in self.neck_positions:
            if not 1 <= pos <= self.depth:
                raise ConfigError(
                    f"neck position {pos} outside 1..{self.depth}")
        if len(self.feature_tap_positions) != 4:
            raise ConfigError(
                f"exactly 4 feature taps required, got {len(self.feature_tap_positions)}")
        for pos in self.feature_tap_positions:
            if not 1 <= pos <= self.depth:
                raise ConfigError(f"feature tap {pos} outside 1..{self.depth}")

    @property
    def grid_size(self) -> tuple[int, int]:
        return (self.image_size[0] // self.patch_size,
                self.image_size[1] // self.patch_size)


@dataclass
class TokenFeatureSet:
    """Spatial token grids recorded at the tap positions, each (B, C, h, w)."""

    grids: list[torch.Tensor] = field(default_factory=list)
    grid_size: tuple[int, int] = (0, 0)


class TuningBlock(nn.Module):
    """Pre-norm transformer block, frozen except the DV-LoRA residuals on the MLP.

    The attention path carries no adapters at all.
    """

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float, lora_rank: int,
                 seed: int = 0):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.ln1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.ln2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)
        for p in self.parameters():
            p.requires_grad_(False)
        self.adapter_up = DVLoRAAdapter(hidden, dim, lora_rank, seed=seed)
        self.adapter_down = DVLoRAAdapter(dim, hidden, lora_rank, seed=seed + 1)

    def _attention(self, x: torch.Tensor) -> torch.Tensor:
        b, n, c = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.num_heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        attn = torch.softmax(q @ k.transpose(-2, -1) / self.head_dim ** 0.5, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(out)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.ln1.normalized_shape[0]:
            raise ConfigError(
                f"token dim {x.shape[-1]} does not match block dim "
                f"{self.ln1.normalized_shape[0]}")
        x = x + self._attention(self.ln1(x))
        h = self.ln2(x)
        h = self.adapter_up(h, self.fc1.weight) + self.fc1.bias
        h = F.gelu(h)
        h = self.adapter_down(h, self.fc2.weight) + self.fc2.bias
        return x + h


class ConvNeck(nn.Module):
    """Residual block of three same-padded 3x3 convs with per-location LayerNorm.

    Channel-preserving end to end; the inner width is bottlenecked and the last
    conv starts at zero, so the block is the identity at initialization.
    """

    def __init__(self, channels: int, hidden: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, hidden, 3, padding=1)
        self.norm1 = nn.LayerNorm(hidden)
        self.conv2 = nn.Conv2d(hidden, hidden, 3, padding=1)
        self.norm2 = nn.LayerNorm(hidden)
        self.conv3 = nn.Conv2d(hidden, channels, 3, padding=1)
        self.norm3 = nn.LayerNorm(channels)
        nn.init.zeros_(self.conv3.weight)
        nn.init.zeros_(self.conv3.bias)

    @staticmethod
    def _conv_ln(x, conv, norm):
        # conv in NCHW, LayerNorm over the channel dim per spatial location
        x = conv(x)
        return norm(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)

    def forward(self, tokens: torch.Tensor, spatial_shape: tuple[int, int]) -> torch.Tensor:
        h, w = spatial_shape
        b, n, c = tokens.shape
        if n != h * w:
            raise DimensionError(f"{n} tokens cannot reshape to a {h}x{w} grid")
        x = tokens.reshape(b, h, w, c).permute(0, 3, 1, 2)
        y = F.gelu(self._conv_ln(x, self.conv1, self.norm1))
        y = F.gelu(self._conv_ln(y, self.conv2, self.norm2))
        y = self._conv_ln(y, self.conv3, self.norm3)
        return tokens + y.permute(0, 2, 3, 1).reshape(b, n, c)


class AdaptedEncoder(nn.Module):
    """Patch embedding + tuning blocks + conv necks, emitting 4 tap features.

    Only the adapters and necks can train; everything else is frozen. If no
    external backbone checkpoint is loaded, the frozen weights keep their
    random initialization (sufficient for every property test).
    """

    def __init__(self, config: EncoderConfig, seed: int = 0):
        super().__init__()
        self.config = config
        c = config.embed_dim
        gh, gw = config.grid_size
        self.patch_embed = nn.Conv2d(3, c, config.patch_size, stride=config.patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, c))
        self.pos_embed = nn.Parameter(torch.zeros(1, gh * gw + 1, c))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        self.blocks = nn.ModuleList([
            TuningBlock(c, config.num_heads, config.mlp_ratio, config.lora_rank,
                        seed=seed + 2 * i)
            for i in range(config.depth)
        ])
        for name, p in self.named_parameters():
            if "adapter" not in name:
                p.requires_grad_(False)
        self.necks = nn.ModuleDict({
            str(pos): ConvNeck(c, config.neck_channels) for pos in config.neck_positions
        })

    def adapters(self):
        for block in self.blocks:
            yield block.adapter_up
            yield block.adapter_down

    def set_adapter_phase(self, global_step: int, warmup_steps: int) -> None:
        for adapter in self.adapters():
            adapter.set_phase(global_step, warmup_steps)

    def forward(self, image: torch.Tensor) -> TokenFeatureSet:
        cfg = self.config
        if image.dim() != 4 or image.shape[1] != 3:
            raise DimensionError(f"image must be (B, 3, H, W), got {tuple(image.shape)}")
        if tuple(image.shape[-2:]) != tuple(cfg.image_size):
            raise DimensionError(
                f"image is {tuple(image.shape[-2:])}, encoder configured for {cfg.image_size}")
        b = image.shape[0]
        gh, gw = cfg.grid_size
        x = self.patch_embed(image).flatten(2).transpose(1, 2)
        x = torch.cat([self.cls_token.expand(b, -1, -1), x], dim=1) + self.pos_embed
        features = TokenFeatureSet(grid_size=(gh, gw))
        taps: dict[int, torch.Tensor] = {}
        for idx, block in enumerate(self.blocks, start=1):
            x = block(x)
            if str(idx) in self.necks:
                spatial = self.necks[str(idx)](x[:, 1:], (gh, gw))
                x = torch.cat([x[:, :1], spatial], dim=1)
            if idx in cfg.feature_tap_positions:
                taps[idx] = x[:, 1:].transpose(1, 2).reshape(b, cfg.embed_dim, gh, gw)
        features.grids = [taps[idx] for idx in cfg.feature_tap_positions]
        return features

    def load_backbone(self, path) -> int:
        """Import frozen backbone weights from a named-array .npz archive.

        Keys are this encoder's state-dict names for the frozen tensors (see
        README "Backbone checkpoints"); adapter/neck entries are ignored.
        Returns the number of tensors loaded.
        """
        archive = np.load(path)
        state = self.state_dict()
        loaded = 0
        for key in archive.files:
            if key not in state:
                raise ConfigError(f"unknown tensor '{key}' in backbone archive")
            tensor = torch.from_numpy(archive[key])
            if tensor.shape != state[key].shape:
                raise ConfigError(
                    f"backbone tensor '{key}' has shape {tuple(tensor.shape)}, "
                    f"expected {tuple(state[key].shape)}")
            with torch.no_grad():
                state[key].copy_(tensor)
            loaded += 1
        return loaded
