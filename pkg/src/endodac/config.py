"""Training configuration: dataclass, tier presets, and the sectioned
key=value config-file format with dotted-key overrides."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

from .depth_net import DecoderConfig
from .errors import ConfigError
from .losses import LossConfig
from .vit_adapter import EncoderConfig


@dataclass
class TrainConfig:
    # [train]
    learning_rate: float = 1e-4
    batch_size: int = 8
    epochs: int = 20
    warmup_steps: int = 5000
    weight_decay: float = 1e-2
    cosine_decay: bool = False
    given_intrinsics: bool = False
    seed: int = 0
    log_every: int = 1
    # [loss]
    alpha: float = 0.85
    smoothness_weight: float = 1e-3
    scales: int = 4
    min_reprojection: bool = True
    min_depth: float = 0.1
    max_depth: float = 100.0
    # [model]
    tier: str = "paper"
    image_height: int = 224
    image_width: int = 224
    patch_size: int = 14
    embed_dim: int = 768
    vit_depth: int = 12
    num_heads: int = 12
    lora_rank: int = 4
    neck_positions: tuple[int, ...] = (3, 6, 9, 12)
    neck_channels: int = 18
    feature_taps: tuple[int, ...] = (3, 6, 9, 12)
    level_channels: tuple[int, ...] = (96, 192, 384, 768)
    fusion_channels: int = 160
    head_channels: int = 32
    pose_width: int = 64
    pose_decoder_channels: int = 256
    # [data]
    manifests: tuple[str, ...] = ()

    def __post_init__(self):
        for name in ("learning_rate", "batch_size", "epochs", "lora_rank",
                     "image_height", "image_width", "patch_size", "embed_dim",
                     "vit_depth", "num_heads"):
            if getattr(self, name) < (0 if name == "epochs" else 1e-12):
                raise ConfigError(f"config key '{name}' must be positive")
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be >= 0")
        if self.tier not in ("paper", "desk"):
            raise ConfigError(f"unknown tier '{self.tier}' (choose paper or desk)")

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            image_size=(self.image_height, self.image_width),
            patch_size=self.patch_size,
            embed_dim=self.embed_dim,
            depth=self.vit_depth,
            num_heads=self.num_heads,
            lora_rank=self.lora_rank,
            neck_positions=tuple(self.neck_positions),
            neck_channels=self.neck_channels,
            feature_tap_positions=tuple(self.feature_taps),
        )

    def decoder_config(self) -> DecoderConfig:
        return DecoderConfig(
            embed_dim=self.embed_dim,
            level_channels=tuple(self.level_channels),
            fusion_channels=self.fusion_channels,
            head_channels=self.head_channels,
        )

    def loss_config(self) -> LossConfig:
        return LossConfig(
            alpha=self.alpha,
            smoothness_weight=self.smoothness_weight,
            scales=self.scales,
            min_reprojection=self.min_reprojection,
            min_depth=self.min_depth,
            max_depth=self.max_depth,
        )

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        raw = json.loads(text)
        for key, value in raw.items():
            if isinstance(value, list):
                raw[key] = tuple(value)
        return cls(**raw)


# Desk tier: the same formulas at a scale a CPU can train in minutes. Learning
# rates are higher and depth bounds tighter because runs are a few hundred
# steps on synthetic scenes, not 20 epochs on real video.
DESK_PRESET = dict(
    tier="desk",
    learning_rate=1e-3,
    cosine_decay=True,
    batch_size=4,
    epochs=2,
    warmup_steps=200,
    image_height=64,
    image_width=80,
    patch_size=8,
    embed_dim=64,
    vit_depth=4,
    num_heads=2,
    neck_positions=(1, 2, 3, 4),
    neck_channels=16,
    feature_taps=(1, 2, 3, 4),
    level_channels=(16, 24, 32, 48),
    fusion_channels=48,
    head_channels=32,
    pose_width=16,
    pose_decoder_channels=64,
    min_depth=0.5,
    max_depth=10.0,
    smoothness_weight=1e-3,
)


def desk_config(**overrides) -> TrainConfig:
    merged = dict(DESK_PRESET)
    merged.update(overrides)
    return TrainConfig(**merged)


def paper_config(**overrides) -> TrainConfig:
    return TrainConfig(**overrides)


_SECTION_OF = {}
for _name, _section in (
    [(f, "train") for f in ("learning_rate", "batch_size", "epochs", "warmup_steps",
                            "weight_decay", "cosine_decay", "given_intrinsics",
                            "seed", "log_every")]
    + [(f, "loss") for f in ("alpha", "smoothness_weight", "scales",
                             "min_reprojection", "min_depth", "max_depth")]
    + [(f, "model") for f in ("tier", "image_height", "image_width", "patch_size",
                              "embed_dim", "vit_depth", "num_heads", "lora_rank",
                              "neck_positions", "neck_channels", "feature_taps",
                              "level_channels", "fusion_channels", "head_channels",
                              "pose_width", "pose_decoder_channels")]
    + [("manifests", "data")]
):
    _SECTION_OF[_name] = _section

_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(TrainConfig)}


def valid_keys() -> list[str]:
    return sorted(f"{_SECTION_OF[name]}.{name}" for name in _SECTION_OF)


def default_of(field_name: str):
    for f in dataclasses.fields(TrainConfig):
        if f.name == field_name:
            if f.default is not dataclasses.MISSING:
                return f.default
            return f.default_factory()
    raise KeyError(field_name)


def _parse_value(name: str, text: str):
    ftype = _FIELD_TYPES[name]
    text = text.strip()
    try:
        if ftype == "bool":
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: '{text}'")
        if ftype == "int":
            return int(text)
        if ftype == "float":
            return float(text)
        if ftype == "str":
            return text
        if ftype.startswith("tuple[int"):
            return tuple(int(t) for t in text.replace(",", " ").split())
        if ftype.startswith("tuple[str"):
            return tuple(t for t in text.replace(",", " ").split())
    except ValueError as exc:
        raise ConfigError(f"bad value for '{name}': {exc}")
    raise ConfigError(f"unhandled config field type for '{name}'")


def _lookup(dotted: str) -> str:
    """Resolve 'section.key' (or bare 'key') to a TrainConfig field name."""
    if "." in dotted:
        section, key = dotted.split(".", 1)
    else:
        section, key = None, dotted
    if key not in _SECTION_OF or (section is not None and _SECTION_OF[key] != section):
        raise ConfigError(
            f"unknown config key '{dotted}'; valid keys: {', '.join(valid_keys())}")
    return key


def parse_config_file(path) -> dict:
    """Sectioned key=value file -> {field: parsed value}. Unknown keys error."""
    path = Path(path)
    if not path.exists():
        raise OSError(f"config file not found: {path}")
    section = None
    out = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in ("train", "loss", "model", "data"):
                raise ConfigError(f"{path}:{lineno}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got '{line}'")
        key, value = (s.strip() for s in line.split("=", 1))
        dotted = f"{section}.{key}" if section else key
        field_name = _lookup(dotted)
        out[field_name] = _parse_value(field_name, value)
    return out


def apply_overrides(values: dict, overrides: list[str]) -> dict:
    """Apply 'section.key=value' command-line overrides on top of file values."""
    out = dict(values)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override '{item}' is not of the form key=value")
        dotted, text = item.split("=", 1)
        field_name = _lookup(dotted.strip())
        out[field_name] = _parse_value(field_name, text)
    return out


def build_config(values: dict) -> TrainConfig:
    """Assemble a TrainConfig: tier preset first, then explicit values."""
    tier = values.get("tier", "paper")
    base = dict(DESK_PRESET) if tier == "desk" else {}
    base.update(values)
    try:
        return TrainConfig(**base)
    except TypeError as exc:
        raise ConfigError(str(exc))


def write_config_file(config: TrainConfig, path) -> None:
    by_section: dict[str, list[str]] = {"train": [], "loss": [], "model": [], "data": []}
    for f in dataclasses.fields(TrainConfig):
        value = getattr(config, f.name)
        if isinstance(value, tuple):
            text = " ".join(str(v) for v in value)
        elif isinstance(value, bool):
            text = "true" if value else "false"
        else:
            text = str(value)
        by_section[_SECTION_OF[f.name]].append(f"{f.name}={text}")
    lines = []
    for section in ("train", "loss", "model", "data"):
        lines.append(f"[{section}]")
        lines.extend(by_section[section])
        lines.append("")
    Path(path).write_text("\n".join(lines))
