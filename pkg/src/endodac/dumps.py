"""On-disk interchange formats.

Depth dump (.edac): magic bytes "EDAC", u32 height, u32 width (little-endian),
then height*width float32 little-endian row-major depth values.

Pose dump: 16 whitespace-separated numbers, a row-major 4x4 homogeneous matrix,
one text file per frame (ground truth, world-from-camera) or per source-target
pair (predictions).

Intrinsics dump: one text file per sequence, one "fx fy cx cy" normalized line
per frame pair.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DimensionError

EDAC_MAGIC = b"EDAC"


def write_depth(path, depth: np.ndarray) -> None:
    depth = np.asarray(depth, dtype=np.float32)
    if depth.ndim != 2:
        raise DimensionError(f"depth dump expects a 2-D map, got shape {depth.shape}")
    h, w = depth.shape
    with open(path, "wb") as f:
        f.write(EDAC_MAGIC)
        f.write(struct.pack("<II", h, w))
        f.write(depth.astype("<f4").tobytes(order="C"))


def read_depth(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != EDAC_MAGIC:
            raise OSError(f"{path}: bad magic {magic!r}, expected {EDAC_MAGIC!r}")
        h, w = struct.unpack("<II", f.read(8))
        data = np.frombuffer(f.read(4 * h * w), dtype="<f4")
        if data.size != h * w:
            raise OSError(f"{path}: truncated depth payload")
    return data.reshape(h, w).astype(np.float32)


def write_pose(path, mat: np.ndarray) -> None:
    mat = np.asarray(mat, dtype=np.float64)
    if mat.shape != (4, 4):
        raise DimensionError(f"pose dump expects a 4x4 matrix, got shape {mat.shape}")
    Path(path).write_text(" ".join(f"{v:.17g}" for v in mat.reshape(-1)) + "\n")


def read_pose(path) -> np.ndarray:
    values = [float(tok) for tok in Path(path).read_text().split()]
    if len(values) != 16:
        raise OSError(f"{path}: expected 16 numbers, found {len(values)}")
    return np.array(values, dtype=np.float64).reshape(4, 4)


def write_intrinsics(path, rows) -> None:
    lines = []
    for row in rows:
        if len(row) != 4:
            raise DimensionError(f"intrinsics row must have 4 entries, got {len(row)}")
        lines.append(" ".join(f"{float(v):.17g}" for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_intrinsics(path) -> np.ndarray:
    rows = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        vals = [float(tok) for tok in line.split()]
        if len(vals) != 4:
            raise OSError(f"{path}: intrinsics line needs 4 numbers, found {len(vals)}")
        rows.append(vals)
    if not rows:
        raise OSError(f"{path}: no intrinsics rows")
    return np.array(rows, dtype=np.float64)


def format_results(results: dict, title: str = "results") -> str:
    """Aligned text table followed by a machine-readable key=value block."""
    keys = list(results.keys())
    width = max(len(k) for k in keys) + 2
    lines = [f"{k:<{width}}{results[k]:.6f}" for k in keys]
    block = [f"[{title}]"] + [f"{k}={results[k]:.10g}" for k in keys]
    return "\n".join(lines) + "\n\n" + "\n".join(block) + "\n"


def parse_results_block(text: str) -> dict:
    out = {}
    in_block = False
    for line in text.splitlines():
        line = line.strip()
        if line.startswith("[") and line.endswith("]"):
            in_block = True
            continue
        if in_block and "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = float(v)
    return out
