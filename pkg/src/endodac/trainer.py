"""Joint optimization of DepthNet and the pose-intrinsics net.

Two AdamW optimizers with decoupled weight decay, one per network. The depth
optimizer holds the full trainable union (all four DV-LoRA factors, necks,
heads); which factors actually move is governed by the warm-up phase flags, as
parameters whose gradient is None are skipped by the optimizer. Checkpoints
are single-file .npz archives of named float arrays plus a JSON config and
shape manifest.
"""

from __future__ import annotations

import dataclasses
import json
import math
import random
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import dumps
from .config import TrainConfig
from .data import (SequenceManifest, TripletDataset, augment, collate,
                   load_frame)
from .depth_net import DepthNet, count_parameters, disp_to_depth
from .dvlora import TrainPhase
from .errors import CheckpointVersionError, ConfigError, NumericAbort
from .losses import total_loss
from .pose_intrinsics import (CameraIntrinsics, PoseIntrinsicsNet,
                              intrinsics_to_matrix)

CHECKPOINT_VERSION = 1


@dataclass
class TrainingSession:
    config: TrainConfig
    depth_net: DepthNet
    pose_net: PoseIntrinsicsNet
    depth_opt: torch.optim.AdamW
    pose_opt: torch.optim.AdamW
    log_dir: Path | None = None
    epoch: int = 0
    global_step: int = 0


def build_models(config: TrainConfig) -> tuple[DepthNet, PoseIntrinsicsNet]:
    torch.manual_seed(config.seed)
    depth_net = DepthNet(config.encoder_config(), config.decoder_config(),
                         seed=config.seed)
    pose_net = PoseIntrinsicsNet(base_width=config.pose_width,
                                 decoder_channels=config.pose_decoder_channels)
    return depth_net, pose_net


def depth_trainable_union(depth_net: DepthNet):
    """All parameters that can ever train: every DV-LoRA factor, necks, heads."""
    for adapter in depth_net.adapters():
        yield from adapter.parameters()
    yield from depth_net.encoder.necks.parameters()
    yield from depth_net.decoder.heads.parameters()


def make_session(config: TrainConfig, log_dir=None) -> TrainingSession:
    depth_net, pose_net = build_models(config)
    depth_opt = torch.optim.AdamW(list(depth_trainable_union(depth_net)),
                                  lr=config.learning_rate,
                                  weight_decay=config.weight_decay)
    pose_opt = torch.optim.AdamW(pose_net.parameters(),
                                 lr=config.learning_rate,
                                 weight_decay=config.weight_decay)
    return TrainingSession(config=config, depth_net=depth_net, pose_net=pose_net,
                           depth_opt=depth_opt, pose_opt=pose_opt,
                           log_dir=Path(log_dir) if log_dir else None)


def _batch_intrinsics(batch, config: TrainConfig) -> CameraIntrinsics:
    vals = batch["intrinsics"]
    return CameraIntrinsics(fx_norm=vals[:, 0], fy_norm=vals[:, 1],
                            cx_norm=vals[:, 2], cy_norm=vals[:, 3])


def _mean_intrinsics(a: CameraIntrinsics, b: CameraIntrinsics) -> CameraIntrinsics:
    return CameraIntrinsics(
        fx_norm=(a.fx_norm + b.fx_norm) / 2,
        fy_norm=(a.fy_norm + b.fy_norm) / 2,
        cx_norm=(a.cx_norm + b.cx_norm) / 2,
        cy_norm=(a.cy_norm + b.cy_norm) / 2,
    )


def _dump_bad_batch(session: TrainingSession, batch, bad: list[int]) -> None:
    if session.log_dir is None:
        return
    session.log_dir.mkdir(parents=True, exist_ok=True)
    path = session.log_dir / f"bad_batch_step{session.global_step:06d}.npz"
    np.savez(path, indices=batch["indices"].numpy(),
             bad_positions=np.array(bad),
             raw_target=batch["raw_target"].detach().numpy())


def training_step(batch: dict, session: TrainingSession, config: TrainConfig,
                  global_step: int) -> tuple[float, dict]:
    """One optimization step over a collated triplet batch."""
    session.depth_net.set_adapter_phase(global_step, config.warmup_steps)
    session.depth_net.train()
    session.pose_net.train()

    pyramid = session.depth_net(batch["net_target"])
    bad = [i for i in range(batch["net_target"].shape[0])
           if not all(bool(torch.isfinite(m[i]).all()) for m in pyramid.maps)]
    if bad:
        _dump_bad_batch(session, batch, bad)
        raise NumericAbort(
            f"non-finite disparity at step {global_step}; offending batch positions "
            f"{bad} (dataset indices {[int(batch['indices'][i]) for i in bad]})")
    estimate = not config.given_intrinsics
    pose_prev, intr_prev = session.pose_net(batch["net_prev"], batch["net_target"],
                                            estimate_intrinsics=estimate)
    pose_next, intr_next = session.pose_net(batch["net_next"], batch["net_target"],
                                            estimate_intrinsics=estimate)
    if config.given_intrinsics:
        intr = _batch_intrinsics(batch, config)
    else:
        intr = _mean_intrinsics(intr_prev, intr_next)
    k, _ = intrinsics_to_matrix(intr, config.image_width, config.image_height)

    loss, diag = total_loss(batch["raw_target"], [batch["raw_prev"], batch["raw_next"]],
                            pyramid, [pose_prev, pose_next], k,
                            config.loss_config())
    if not torch.isfinite(loss):
        n = batch["raw_target"].shape[0]
        bad = [i for i in range(n)
               if not all(bool(torch.isfinite(m[i]).all()) for m in pyramid.maps)]
        bad = bad or list(range(n))
        _dump_bad_batch(session, batch, bad)
        raise NumericAbort(
            f"non-finite loss at step {global_step}; offending batch positions "
            f"{bad} (dataset indices {[int(batch['indices'][i]) for i in bad]})")

    session.depth_opt.zero_grad()
    session.pose_opt.zero_grad()
    loss.backward()
    session.depth_opt.step()
    session.pose_opt.step()

    phase = next(session.depth_net.adapters()).phase
    out = diag.as_dict()
    out["phase"] = phase.value
    out["lr"] = session.depth_opt.param_groups[0]["lr"]
    if not config.given_intrinsics:
        fx, fy, cx, cy = _mean_intrinsics(intr_prev, intr_next).normalized()
        out.update({"fx_norm": fx, "fy_norm": fy, "cx_norm": cx, "cy_norm": cy})
    return float(loss.detach()), out


@dataclass
class TrainResult:
    checkpoints: list[Path] = field(default_factory=list)
    best_checkpoint: Path | None = None
    log_path: Path | None = None
    history: list[dict] = field(default_factory=list)


def _format_log_line(step: int, epoch: int, loss: float, diag: dict) -> str:
    parts = [f"step={step}", f"epoch={epoch}", f"total={loss:.6f}",
             f"photometric={diag['photometric']:.6f}",
             f"smoothness={diag['smoothness']:.6f}"]
    for s, v in enumerate(diag.get("scale_photometric", [])):
        parts.append(f"photo_s{s}={v:.6f}")
    for s, v in enumerate(diag.get("scale_smoothness", [])):
        parts.append(f"smooth_s{s}={v:.6f}")
    parts.append(f"lr={diag['lr']:.3g}")
    parts.append(f"phase={diag['phase']}")
    for key in ("fx_norm", "fy_norm", "cx_norm", "cy_norm"):
        if key in diag:
            parts.append(f"{key}={diag[key]:.5f}")
    return " ".join(parts)


def _augment_seed(base_seed: int, epoch: int, entry_index: int) -> int:
    return (base_seed * 1_000_003 + epoch * 10_007 + entry_index * 101) % (2 ** 31)


def train(config: TrainConfig, manifests: list[SequenceManifest], out_dir,
          resume_from=None, max_steps: int | None = None) -> TrainResult:
    """Full loop: epochs * ceil(N / batch) steps, checkpoint every epoch.

    Deterministic given config.seed. max_steps optionally truncates the run
    (still checkpointing at the end), which the desk-scale harness uses.
    """
    if not manifests:
        raise ConfigError("at least one manifest is required for training")
    if config.given_intrinsics and any(m.intrinsics is None for m in manifests):
        raise ConfigError("given_intrinsics is set but a manifest lacks intrinsics")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    session = make_session(config, log_dir=out)
    start_epoch = 0
    if resume_from is not None:
        meta = load_into_session(session, resume_from)
        start_epoch = meta["epoch"]
    else:
        torch.manual_seed(config.seed)

    dataset = TripletDataset(manifests,
                             image_size=(config.image_height, config.image_width))
    steps_per_epoch = math.ceil(len(dataset) / config.batch_size)
    total_steps = config.epochs * steps_per_epoch

    result = TrainResult(log_path=out / "train_log.txt")
    log_lines: list[str] = []
    if resume_from is None:
        initial = out / "ckpt_epoch_000.npz"
        save_checkpoint(initial, session)
        result.checkpoints.append(initial)

    best_photo = float("inf")
    stop = False
    for epoch in range(start_epoch, config.epochs):
        session.epoch = epoch
        order = list(range(len(dataset)))
        random.Random(config.seed * 9973 + epoch).shuffle(order)
        epoch_photo: list[float] = []
        for start in range(0, len(order), config.batch_size):
            entries = order[start:start + config.batch_size]
            triplets = []
            for i in entries:
                triplet = dataset.load(i)
                if config.given_intrinsics:
                    m_idx, _ = dataset.entries[i]
                    triplet.intrinsics = manifests[m_idx].intrinsics
                triplets.append(augment(triplet,
                                        _augment_seed(config.seed, epoch, i)))
            batch = collate(triplets)
            if config.given_intrinsics:
                batch["intrinsics"] = torch.tensor(
                    [t.intrinsics for t in triplets], dtype=torch.float32)
            if config.cosine_decay and total_steps > 0:
                scale = 0.5 * (1 + math.cos(math.pi * session.global_step / total_steps))
                for opt in (session.depth_opt, session.pose_opt):
                    for group in opt.param_groups:
                        group["lr"] = config.learning_rate * scale
            loss, diag = training_step(batch, session, config, session.global_step)
            diag["step"] = session.global_step
            diag["epoch"] = epoch
            result.history.append(diag)
            epoch_photo.append(diag["photometric"])
            if session.global_step % config.log_every == 0:
                log_lines.append(_format_log_line(session.global_step, epoch,
                                                  loss, diag))
            session.global_step += 1
            if max_steps is not None and session.global_step >= max_steps:
                stop = True
                break
        session.epoch = epoch + 1
        ckpt = out / f"ckpt_epoch_{epoch + 1:03d}.npz"
        save_checkpoint(ckpt, session)
        result.checkpoints.append(ckpt)
        mean_photo = float(np.mean(epoch_photo)) if epoch_photo else float("inf")
        if mean_photo < best_photo:
            best_photo = mean_photo
            best = out / "ckpt_best.npz"
            save_checkpoint(best, session)
            result.best_checkpoint = best
        if stop:
            break

    result.log_path.write_text("\n".join(log_lines) + ("\n" if log_lines else ""))
    return result


# --- checkpoint archive -----------------------------------------------------

def _optimizer_arrays(opt: torch.optim.Optimizer, prefix: str, arrays: dict) -> dict:
    state = opt.state_dict()
    meta = {"param_groups": state["param_groups"], "state_keys": {}}
    for idx, entry in state["state"].items():
        keys = []
        for key, value in entry.items():
            name = f"{prefix}/state/{idx}/{key}"
            arrays[name] = (value.detach().cpu().numpy()
                            if torch.is_tensor(value) else np.asarray(value))
            keys.append(key)
        meta["state_keys"][str(idx)] = keys
    return meta


def _restore_optimizer(opt: torch.optim.Optimizer, prefix: str, arrays, meta: dict) -> None:
    state = {"param_groups": meta["param_groups"], "state": {}}
    for idx_str, keys in meta["state_keys"].items():
        entry = {}
        for key in keys:
            value = arrays[f"{prefix}/state/{idx_str}/{key}"]
            entry[key] = torch.from_numpy(np.asarray(value))
        state["state"][int(idx_str)] = entry
    opt.load_state_dict(state)


def save_checkpoint(path, session: TrainingSession) -> None:
    arrays: dict[str, np.ndarray] = {}
    shapes: dict[str, list[int]] = {}
    for net_name, net in (("depth", session.depth_net), ("pose", session.pose_net)):
        for key, tensor in net.state_dict().items():
            name = f"model/{net_name}/{key}"
            arrays[name] = tensor.detach().cpu().numpy()
            shapes[name] = list(tensor.shape)
    for i, adapter in enumerate(session.depth_net.adapters()):
        arrays[f"adapter_meta/{i}/phase"] = np.array(
            0 if adapter.phase is TrainPhase.WARMUP else 1)
        arrays[f"adapter_meta/{i}/rank"] = np.array(adapter.rank)
    opt_meta = {
        "depth": _optimizer_arrays(session.depth_opt, "opt/depth", arrays),
        "pose": _optimizer_arrays(session.pose_opt, "opt/pose", arrays),
    }
    header = {
        "version": CHECKPOINT_VERSION,
        "config": dataclasses.asdict(session.config),
        "epoch": session.epoch,
        "global_step": session.global_step,
        "shapes": shapes,
        "optimizers": opt_meta,
    }
    arrays["__header__"] = np.frombuffer(
        json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    arrays["__torch_rng__"] = torch.get_rng_state().numpy()
    np.savez(path, **arrays)


def read_checkpoint_header(path) -> dict:
    with np.load(path) as archive:
        if "__header__" not in archive.files:
            raise CheckpointVersionError(f"{path}: not a recognized checkpoint archive")
        header = json.loads(bytes(archive["__header__"]).decode())
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: checkpoint version {header.get('version')} is incompatible "
            f"with expected version {CHECKPOINT_VERSION}")
    return header


def load_into_session(session: TrainingSession, path) -> dict:
    """Restore weights, optimizer state, phases, step counters, and RNG state."""
    header = read_checkpoint_header(path)
    stored = TrainConfig.from_json(json.dumps(header["config"]))
    for fname in ("embed_dim", "vit_depth", "patch_size", "image_height",
                  "image_width", "lora_rank", "fusion_channels", "pose_width"):
        if getattr(stored, fname) != getattr(session.config, fname):
            raise CheckpointVersionError(
                f"{path}: checkpoint {fname}={getattr(stored, fname)} does not match "
                f"session {fname}={getattr(session.config, fname)}")
    with np.load(path) as archive:
        for net_name, net in (("depth", session.depth_net), ("pose", session.pose_net)):
            state = net.state_dict()
            for key in state:
                name = f"model/{net_name}/{key}"
                if name not in archive.files:
                    raise CheckpointVersionError(f"{path}: missing tensor {name}")
                with torch.no_grad():
                    state[key].copy_(torch.from_numpy(archive[name]))
        for i, adapter in enumerate(session.depth_net.adapters()):
            phase = int(archive[f"adapter_meta/{i}/phase"])
            adapter.force_phase(TrainPhase.WARMUP if phase == 0 else TrainPhase.VECTOR)
        _restore_optimizer(session.depth_opt, "opt/depth", archive,
                           header["optimizers"]["depth"])
        _restore_optimizer(session.pose_opt, "opt/pose", archive,
                           header["optimizers"]["pose"])
        if "__torch_rng__" in archive.files:
            torch.set_rng_state(torch.from_numpy(archive["__torch_rng__"].copy()))
    session.epoch = header["epoch"]
    session.global_step = header["global_step"]
    return header


def load_session(path, log_dir=None) -> TrainingSession:
    """Rebuild a full session from a checkpoint alone (config is embedded)."""
    header = read_checkpoint_header(path)
    config = TrainConfig.from_json(json.dumps(header["config"]))
    session = make_session(config, log_dir=log_dir)
    load_into_session(session, path)
    return session


# --- inference dumps ---------------------------------------------------------

def run_inference(checkpoint_path, manifest: SequenceManifest, out_dir) -> dict:
    """Write per-frame EDAC depth dumps and per-pair pose/intrinsics dumps."""
    session = load_session(checkpoint_path)
    config = session.config
    session.depth_net.eval()
    session.pose_net.eval()
    out = Path(out_dir)
    (out / "depth").mkdir(parents=True, exist_ok=True)
    (out / "poses").mkdir(parents=True, exist_ok=True)
    size = (config.image_height, config.image_width)

    frames = [load_frame(manifest.frame_file(i), size) for i in range(len(manifest))]
    intr_rows = []
    with torch.no_grad():
        for i, frame in enumerate(frames):
            pyramid = session.depth_net(frame.unsqueeze(0))
            depth = disp_to_depth(pyramid.full_resolution,
                                  config.min_depth, config.max_depth)
            dumps.write_depth(out / "depth" / f"{i:06d}.edac",
                              depth[0, 0].numpy())
        for i in range(len(frames) - 1):
            pose, intr = session.pose_net(frames[i].unsqueeze(0),
                                          frames[i + 1].unsqueeze(0))
            mat = pose.matrix()[0].numpy()
            dumps.write_pose(out / "poses" / f"{i:06d}_{i + 1:06d}.txt", mat)
            intr_rows.append(intr.normalized())
    dumps.write_intrinsics(out / "intrinsics.txt", intr_rows)
    total, trainable = count_parameters(session.depth_net)
    return {"frames": len(frames), "pairs": len(frames) - 1,
            "depth_dir": out / "depth", "pose_dir": out / "poses",
            "intrinsics_file": out / "intrinsics.txt",
            "total_params": total, "trainable_params": trainable}
