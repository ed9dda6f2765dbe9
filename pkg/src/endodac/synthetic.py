"""Synthetic Lambertian scenes with exact ground truth for desk-scale checks.

A textured tilted plane plus a few textured spheres are ray-cast through a
pinhole camera moving along a smooth parametric trajectory. Textures are sums
of sinusoids, so bilinear resampling of rendered frames is nearly exact and
shading is view-independent: adjacent frames are photometrically consistent up
to interpolation and 8-bit quantization. Everything is deterministic in the
scene seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import dumps
from .data import SequenceManifest, write_manifest
from .errors import ConfigError

_RAY_EPS = 1e-6


@dataclass
class TrajectorySpec:
    """Sinusoidal lateral/vertical sway, slow forward motion, small yaw + pitch.

    Default amplitudes give 1-5 px of inter-frame flow at the desk image scale.
    Both rotation axes carry signal on purpose: focal lengths are only
    observable through rotational flow (yaw constrains fx, pitch fy), so a
    yaw-only sweep leaves fy free to drift during joint calibration.
    """

    # rotation and translation periods are deliberately coprime-ish per axis:
    # if yaw and lateral sway oscillate in phase, their image flows correlate
    # and a biased fx can hide in translation-plus-depth adjustments
    lateral_amplitude: float = 0.2
    lateral_period: float = 20.0
    vertical_amplitude: float = 0.15
    vertical_period: float = 31.0
    forward_speed: float = 0.02
    yaw_amplitude: float = 0.16
    yaw_period: float = 27.0
    pitch_amplitude: float = 0.1
    pitch_period: float = 16.0

    @classmethod
    def static(cls) -> "TrajectorySpec":
        return cls(lateral_amplitude=0.0, vertical_amplitude=0.0,
                   forward_speed=0.0, yaw_amplitude=0.0, pitch_amplitude=0.0)


@dataclass
class _Texture:
    base: np.ndarray          # (3,)
    freqs: np.ndarray         # (n, 3) spatial frequencies
    phases: np.ndarray        # (n, 3)
    amps: np.ndarray          # (n, 3)

    # one sinusoid per band: the coarse band gives photometric attraction
    # basins wide enough to capture multi-pixel flow errors, the fine bands
    # sharpen the minimum once roughly aligned
    BANDS = ((0.5, 1.4), (1.4, 3.5), (3.5, 7.5))
    BAND_AMPS = ((0.09, 0.15), (0.06, 0.11), (0.04, 0.08))

    @classmethod
    def sample(cls, rng: np.random.Generator, scale: float) -> "_Texture":
        freqs, amps = [], []
        for (flo, fhi), (alo, ahi) in zip(cls.BANDS, cls.BAND_AMPS):
            freqs.append(rng.uniform(flo, fhi, size=3) * scale)
            amps.append(rng.uniform(alo, ahi, size=3))
        return cls(
            base=rng.uniform(0.45, 0.6, size=3),
            freqs=np.array(freqs),
            phases=rng.uniform(0, 2 * np.pi, size=(len(cls.BANDS), 3)),
            amps=np.array(amps),
        )

    def albedo(self, points: np.ndarray) -> np.ndarray:
        """points (..., 3) -> rgb (..., 3), everywhere in roughly [0.1, 0.95]."""
        out = np.broadcast_to(self.base, points.shape[:-1] + (3,)).copy()
        for freq, phase, amp in zip(self.freqs, self.phases, self.amps):
            arg = points @ freq
            out += amp * np.sin(arg[..., None] + phase)
        return np.clip(out, 0.05, 0.98)


@dataclass
class _Sphere:
    center: np.ndarray
    radius: float
    texture: _Texture


@dataclass
class SyntheticScene:
    plane_normal: np.ndarray
    plane_offset: float
    plane_texture: _Texture
    spheres: list[_Sphere] = field(default_factory=list)
    light_dir: np.ndarray = field(default_factory=lambda: np.array([0.3, -0.5, -0.8]))
    ambient: float = 0.45
    diffuse: float = 0.55

    @classmethod
    def sample(cls, seed: int) -> "SyntheticScene":
        rng = np.random.default_rng(seed)
        normal = np.array([0.25, 0.35, -1.0]) + rng.uniform(-0.05, 0.05, size=3)
        normal /= np.linalg.norm(normal)
        anchor = np.array([0.0, 0.0, rng.uniform(5.0, 6.0)])
        n_spheres = int(rng.integers(3, 6))
        spheres = []
        for _ in range(n_spheres):
            center = np.array([
                rng.uniform(-1.4, 1.4),
                rng.uniform(-1.0, 1.0),
                rng.uniform(3.2, 4.8),
            ])
            spheres.append(_Sphere(
                center=center,
                radius=float(rng.uniform(0.35, 0.7)),
                texture=_Texture.sample(rng, scale=rng.uniform(1.5, 2.5)),
            ))
        light = rng.uniform(-1.0, 1.0, size=3)
        light[2] = -abs(light[2]) - 0.5  # light roughly behind the camera
        return cls(
            plane_normal=normal,
            plane_offset=float(normal @ anchor),
            plane_texture=_Texture.sample(rng, scale=1.0),
            spheres=spheres,
            light_dir=light / np.linalg.norm(light),
        )


def yaw_matrix(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def pitch_matrix(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def camera_pose(traj: TrajectorySpec, frame: int) -> np.ndarray:
    """World-from-camera 4x4 pose at a frame index."""
    k = float(frame)
    tx = traj.lateral_amplitude * np.sin(2 * np.pi * k / traj.lateral_period) \
        if traj.lateral_amplitude else 0.0
    ty = traj.vertical_amplitude * np.sin(2 * np.pi * k / traj.vertical_period + 1.3) \
        if traj.vertical_amplitude else 0.0
    tz = traj.forward_speed * k
    yaw = traj.yaw_amplitude * np.sin(2 * np.pi * k / traj.yaw_period + 0.9) \
        if traj.yaw_amplitude else 0.0
    pitch = traj.pitch_amplitude * np.sin(2 * np.pi * k / traj.pitch_period + 0.7) \
        if traj.pitch_amplitude else 0.0
    pose = np.eye(4)
    pose[:3, :3] = yaw_matrix(yaw) @ pitch_matrix(pitch)
    pose[:3, 3] = (tx, ty, tz)
    return pose


def intrinsics_matrix(intrinsics, width: int, height: int) -> np.ndarray:
    fx, fy, cx, cy = intrinsics
    return np.array([
        [fx * width, 0.0, cx * width],
        [0.0, fy * height, cy * height],
        [0.0, 0.0, 1.0],
    ])


def render_frame(scene: SyntheticScene, pose_wc: np.ndarray, intrinsics,
                 image_size: tuple[int, int]
                 ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Ray-cast one frame.

    Returns (rgb float (H, W, 3) in [0, 1], depth (H, W) camera z-depth,
    points (H, W, 3) world-space hit points). Camera rays are built with an
    unnormalized z=1 direction so the ray parameter equals camera depth.
    """
    h, w = image_size
    k = intrinsics_matrix(intrinsics, w, h)
    u, v = np.meshgrid(np.arange(w, dtype=np.float64),
                       np.arange(h, dtype=np.float64))
    dirs_cam = np.stack([(u - k[0, 2]) / k[0, 0], (v - k[1, 2]) / k[1, 1],
                         np.ones_like(u)], axis=-1)
    rot = pose_wc[:3, :3]
    origin = pose_wc[:3, 3]
    dirs = dirs_cam @ rot.T

    depth = np.full((h, w), np.inf)
    hit_id = np.full((h, w), -1, dtype=np.int64)

    denom = dirs @ scene.plane_normal
    t_plane = np.where(np.abs(denom) > _RAY_EPS,
                       (scene.plane_offset - origin @ scene.plane_normal) / denom,
                       np.inf)
    plane_ok = t_plane > _RAY_EPS
    depth = np.where(plane_ok, t_plane, depth)
    hit_id = np.where(plane_ok, 0, hit_id)

    for i, sph in enumerate(scene.spheres, start=1):
        oc = origin - sph.center
        a = np.sum(dirs * dirs, axis=-1)
        b = 2.0 * (dirs @ oc)
        c0 = oc @ oc - sph.radius ** 2
        disc = b * b - 4 * a * c0
        ok = disc > 0
        t = np.where(ok, (-b - np.sqrt(np.where(ok, disc, 0.0))) / (2 * a), np.inf)
        closer = (t > _RAY_EPS) & (t < depth)
        depth = np.where(closer, t, depth)
        hit_id = np.where(closer, i, hit_id)

    points = origin + depth[..., None] * dirs
    rgb = np.full((h, w, 3), 0.08)
    light = -scene.light_dir  # surface-to-light direction

    plane_mask = hit_id == 0
    if plane_mask.any():
        albedo = scene.plane_texture.albedo(points[plane_mask])
        lam = max(0.0, float(scene.plane_normal @ light))
        rgb[plane_mask] = albedo * (scene.ambient + scene.diffuse * lam)
    for i, sph in enumerate(scene.spheres, start=1):
        mask = hit_id == i
        if not mask.any():
            continue
        normals = (points[mask] - sph.center) / sph.radius
        lam = np.clip(normals @ light, 0.0, None)
        albedo = sph.texture.albedo(points[mask] - sph.center)
        rgb[mask] = albedo * (scene.ambient + scene.diffuse * lam[:, None])

    rgb = np.clip(rgb, 0.0, 1.0)
    depth = np.where(np.isfinite(depth), depth, 100.0)
    return rgb, depth, points


def generate_synthetic_sequence(scene_seed: int, n_frames: int,
                                image_size: tuple[int, int],
                                intrinsics=(0.82, 1.02, 0.5, 0.5),
                                trajectory: TrajectorySpec | None = None,
                                output_dir=None) -> SequenceManifest:
    """Render a sequence and write frames/depths/poses plus a manifest file.

    Layout under output_dir: frames/NNNNNN.png, depth/NNNNNN.edac,
    poses/NNNNNN.txt (world-from-camera), manifest.txt. Deterministic in
    scene_seed: rendering twice yields bitwise-identical trees.
    """
    if n_frames < 3:
        raise ConfigError(f"need at least 3 frames, got {n_frames}")
    if output_dir is None:
        raise ConfigError("output_dir is required")
    trajectory = trajectory or TrajectorySpec()
    out = Path(output_dir)
    try:
        for sub in ("frames", "depth", "poses"):
            (out / sub).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}")

    scene = SyntheticScene.sample(scene_seed)
    frame_paths, depth_paths, pose_paths = [], [], []
    for i in range(n_frames):
        pose = camera_pose(trajectory, i)
        rgb, depth, _ = render_frame(scene, pose, intrinsics, image_size)
        name = f"{i:06d}"
        Image.fromarray((rgb * 255.0).round().astype(np.uint8)).save(
            out / "frames" / f"{name}.png")
        dumps.write_depth(out / "depth" / f"{name}.edac", depth)
        dumps.write_pose(out / "poses" / f"{name}.txt", pose)
        frame_paths.append(f"frames/{name}.png")
        depth_paths.append(f"depth/{name}.edac")
        pose_paths.append(f"poses/{name}.txt")

    manifest = SequenceManifest(
        sequence_id=f"synth_{scene_seed:04d}",
        root=out,
        frame_paths=frame_paths,
        image_size=image_size,
        depth_paths=depth_paths,
        pose_paths=pose_paths,
        intrinsics=tuple(float(v) for v in intrinsics),
    )
    write_manifest(manifest, out / "manifest.txt")
    return manifest


def relative_pose(pose_a: np.ndarray, pose_b: np.ndarray) -> np.ndarray:
    """T mapping frame-b camera points into frame a, from world-from-camera poses."""
    return np.linalg.inv(pose_a) @ pose_b


def occlusion_mask(depth_target: np.ndarray, depth_source: np.ndarray,
                   k: np.ndarray, rel: np.ndarray,
                   threshold: float = 0.01) -> np.ndarray:
    """Pixels of the target view whose reprojection is depth-consistent.

    Reprojects target depth into the source view and compares the transformed
    depth with the source depth sampled at the landing point; relative
    disagreement above the threshold marks occlusion. Returns a bool (H, W)
    array that is True where the pixel is visible in both views.
    """
    h, w = depth_target.shape
    u, v = np.meshgrid(np.arange(w, dtype=np.float64),
                       np.arange(h, dtype=np.float64))
    rays = np.stack([u, v, np.ones_like(u)], axis=-1) @ np.linalg.inv(k).T
    cam = rays * depth_target[..., None]
    moved = cam @ rel[:3, :3].T + rel[:3, 3]
    proj = moved @ k.T
    z = proj[..., 2]
    valid = z > _RAY_EPS
    us = np.where(valid, proj[..., 0] / np.maximum(z, _RAY_EPS), -1.0)
    vs = np.where(valid, proj[..., 1] / np.maximum(z, _RAY_EPS), -1.0)
    inside = valid & (us >= 0) & (us <= w - 1) & (vs >= 0) & (vs <= h - 1)

    u0 = np.clip(np.floor(us), 0, w - 2).astype(np.int64)
    v0 = np.clip(np.floor(vs), 0, h - 2).astype(np.int64)
    du = np.clip(us - u0, 0.0, 1.0)
    dv = np.clip(vs - v0, 0.0, 1.0)
    d00 = depth_source[v0, u0]
    d01 = depth_source[v0, u0 + 1]
    d10 = depth_source[v0 + 1, u0]
    d11 = depth_source[v0 + 1, u0 + 1]
    sampled = (d00 * (1 - du) * (1 - dv) + d01 * du * (1 - dv)
               + d10 * (1 - du) * dv + d11 * du * dv)
    consistent = np.abs(z - sampled) <= threshold * np.maximum(sampled, _RAY_EPS)
    return inside & consistent
