"""Sequence manifests, frame-triplet loading, and training augmentation.

A manifest is one text file per video sequence: a key=value header (sequence
id, image size, optional normalized intrinsics) and a [frames] section with one
line per frame holding the frame path and optional ground-truth depth / pose
paths ('-' where absent). All paths are relative to the manifest's directory.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torchvision.transforms import functional as TF

from .errors import ConfigError, DimensionError


@dataclass
class SequenceManifest:
    sequence_id: str
    root: Path
    frame_paths: list[str]
    image_size: tuple[int, int]                      # (height, width)
    depth_paths: list[str] | None = None
    pose_paths: list[str] | None = None              # per-frame world-from-camera
    intrinsics: tuple[float, float, float, float] | None = None

    def __post_init__(self):
        if len(self.frame_paths) < 3:
            raise ConfigError(
                f"sequence '{self.sequence_id}' has {len(self.frame_paths)} frames; "
                "need at least 3 for triplet sampling")
        for name, paths in (("depth", self.depth_paths), ("pose", self.pose_paths)):
            if paths is not None and len(paths) != len(self.frame_paths):
                raise ConfigError(
                    f"sequence '{self.sequence_id}': {name} path count "
                    f"{len(paths)} != frame count {len(self.frame_paths)}")

    def __len__(self):
        return len(self.frame_paths)

    def frame_file(self, i: int) -> Path:
        return self.root / self.frame_paths[i]

    def depth_file(self, i: int) -> Path | None:
        return None if self.depth_paths is None else self.root / self.depth_paths[i]

    def pose_file(self, i: int) -> Path | None:
        return None if self.pose_paths is None else self.root / self.pose_paths[i]


@dataclass
class FrameTriplet:
    """Frames (t-1, t, t+1): raw copies feed the loss, net copies the networks."""

    index: int
    raw: tuple[torch.Tensor, torch.Tensor, torch.Tensor]
    net: tuple[torch.Tensor, torch.Tensor, torch.Tensor]
    flipped: bool = False
    intrinsics: tuple[float, float, float, float] | None = None


def write_manifest(manifest: SequenceManifest, path) -> None:
    lines = [
        f"sequence_id={manifest.sequence_id}",
        f"height={manifest.image_size[0]}",
        f"width={manifest.image_size[1]}",
    ]
    if manifest.intrinsics is not None:
        lines.append("intrinsics=" + " ".join(f"{v:.17g}" for v in manifest.intrinsics))
    lines.append("")
    lines.append("[frames]")
    for i, frame in enumerate(manifest.frame_paths):
        depth = manifest.depth_paths[i] if manifest.depth_paths else "-"
        pose = manifest.pose_paths[i] if manifest.pose_paths else "-"
        lines.append(f"{frame} {depth} {pose}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> SequenceManifest:
    path = Path(path)
    if not path.exists():
        raise OSError(f"manifest not found: {path}")
    header: dict[str, str] = {}
    frames, depths, poses = [], [], []
    in_frames = False
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line == "[frames]":
            in_frames = True
            continue
        if not in_frames:
            if "=" not in line:
                raise ConfigError(f"{path}: malformed header line '{line}'")
            k, v = line.split("=", 1)
            header[k.strip()] = v.strip()
        else:
            parts = line.split()
            if not 1 <= len(parts) <= 3:
                raise ConfigError(f"{path}: malformed frame line '{line}'")
            parts += ["-"] * (3 - len(parts))
            frames.append(parts[0])
            depths.append(parts[1])
            poses.append(parts[2])
    for key in ("sequence_id", "height", "width"):
        if key not in header:
            raise ConfigError(f"{path}: missing header key '{key}'")
    intrinsics = None
    if "intrinsics" in header:
        vals = [float(t) for t in header["intrinsics"].split()]
        if len(vals) != 4:
            raise ConfigError(f"{path}: intrinsics needs 4 values")
        intrinsics = tuple(vals)
    has_depth = any(d != "-" for d in depths)
    has_pose = any(p != "-" for p in poses)
    return SequenceManifest(
        sequence_id=header["sequence_id"],
        root=path.parent,
        frame_paths=frames,
        image_size=(int(header["height"]), int(header["width"])),
        depth_paths=depths if has_depth else None,
        pose_paths=poses if has_pose else None,
        intrinsics=intrinsics,
    )


def load_frame(path, image_size: tuple[int, int]) -> torch.Tensor:
    """Decode one frame, resize to (H, W), return a float tensor in [0, 1]."""
    path = Path(path)
    try:
        with Image.open(path) as img:
            img = img.convert("RGB")
            if img.size != (image_size[1], image_size[0]):
                img = img.resize((image_size[1], image_size[0]), Image.BILINEAR)
            arr = np.asarray(img, dtype=np.float32) / 255.0
    except FileNotFoundError:
        raise OSError(f"frame file missing: {path}")
    except OSError as exc:
        raise OSError(f"cannot decode frame {path}: {exc}")
    return torch.from_numpy(arr).permute(2, 0, 1)


def load_triplet(manifest: SequenceManifest, t: int,
                 image_size: tuple[int, int] | None = None) -> FrameTriplet:
    """Frames (t-1, t, t+1) as raw [0, 1] tensors; net copies start identical."""
    if not 1 <= t <= len(manifest) - 2:
        raise ConfigError(
            f"triplet index {t} outside valid range 1..{len(manifest) - 2}")
    size = image_size or manifest.image_size
    frames = tuple(load_frame(manifest.frame_file(i), size) for i in (t - 1, t, t + 1))
    return FrameTriplet(index=t, raw=frames, net=frames)


def _color_jitter(frames, rng: random.Random):
    # identical factors across the triplet
    b = rng.uniform(0.8, 1.2)
    c = rng.uniform(0.8, 1.2)
    s = rng.uniform(0.8, 1.2)
    h = rng.uniform(-0.05, 0.05)
    out = []
    for f in frames:
        f = TF.adjust_brightness(f, b)
        f = TF.adjust_contrast(f, c)
        f = TF.adjust_saturation(f, s)
        f = TF.adjust_hue(f, h)
        out.append(f.clamp(0.0, 1.0))
    return tuple(out)


def augment(triplet: FrameTriplet, seed: int,
            force_flip: bool | None = None) -> FrameTriplet:
    """Seeded augmentation: 50% horizontal flip applied to raw and net copies,
    50% color jitter applied to net copies only. Deterministic in the seed."""
    rng = random.Random(seed)
    do_flip = rng.random() < 0.5 if force_flip is None else force_flip
    do_jitter = rng.random() < 0.5
    raw = triplet.raw
    net = triplet.net
    if do_flip:
        raw = tuple(torch.flip(f, dims=[-1]) for f in raw)
        net = tuple(torch.flip(f, dims=[-1]) for f in net)
    if do_jitter:
        net = _color_jitter(net, rng)
    return FrameTriplet(index=triplet.index, raw=raw, net=net,
                        flipped=triplet.flipped ^ do_flip,
                        intrinsics=triplet.intrinsics)


@dataclass
class TripletDataset:
    """Flat index over every valid (manifest, t) pair, in manifest order.

    Decoded frames are cached (a desk-scale sequence is a few MB); cached
    tensors are never mutated downstream, augmentation always copies.
    """

    manifests: list[SequenceManifest]
    image_size: tuple[int, int] | None = None
    cache_frames: bool = True
    entries: list[tuple[int, int]] = field(init=False)
    _cache: dict = field(init=False, default_factory=dict)

    def __post_init__(self):
        if not self.manifests:
            raise ConfigError("at least one sequence manifest is required")
        self.entries = [
            (m_idx, t)
            for m_idx, m in enumerate(self.manifests)
            for t in range(1, len(m) - 1)
        ]

    def __len__(self):
        return len(self.entries)

    def _frame(self, m_idx: int, i: int, size) -> torch.Tensor:
        key = (m_idx, i)
        if self.cache_frames and key in self._cache:
            return self._cache[key]
        frame = load_frame(self.manifests[m_idx].frame_file(i), size)
        if self.cache_frames:
            self._cache[key] = frame
        return frame

    def load(self, i: int) -> FrameTriplet:
        m_idx, t = self.entries[i]
        manifest = self.manifests[m_idx]
        if not 1 <= t <= len(manifest) - 2:
            raise ConfigError(f"triplet index {t} outside valid range")
        size = self.image_size or manifest.image_size
        frames = tuple(self._frame(m_idx, j, size) for j in (t - 1, t, t + 1))
        return FrameTriplet(index=t, raw=frames, net=frames)


def collate(triplets: list[FrameTriplet]) -> dict[str, torch.Tensor]:
    """Stack a list of triplets into batch tensors keyed by role."""
    if not triplets:
        raise DimensionError("empty batch")
    out = {}
    for key, sel in (("raw", "raw"), ("net", "net")):
        stacked = [torch.stack([getattr(t, sel)[i] for t in triplets]) for i in range(3)]
        out[f"{key}_prev"], out[f"{key}_target"], out[f"{key}_next"] = stacked
    out["indices"] = torch.tensor([t.index for t in triplets])
    return out
