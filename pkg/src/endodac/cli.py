"""Command-line entry point.

Subcommands: train, infer, eval-depth, eval-pose, eval-intrinsics, gen-synth,
viz. Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numeric
abort. The ENDODAC_SEED environment variable overrides the configured seed.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import dumps, evalkit, synthetic, trainer
from .data import read_manifest
from .errors import ConfigError, EvaluationError, NumericAbort


def _config_key_help() -> str:
    lines = ["config keys (section.key, default):"]
    for dotted in config_mod.valid_keys():
        field = dotted.split(".", 1)[1]
        lines.append(f"  {dotted} = {config_mod.default_of(field)}")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="endodac",
        description="Self-supervised depth adaptation: training, inference, "
                    "evaluation, synthetic data, visualization.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser(
        "train", help="train on sequence manifests",
        epilog=_config_key_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter)
    p_train.add_argument("--config", required=True, help="key=value config file")
    p_train.add_argument("--out", default="runs/train", help="output directory")
    p_train.add_argument("--manifest", action="append", default=[],
                         help="extra sequence manifest (repeatable)")
    p_train.add_argument("--resume", default=None, help="checkpoint to resume from")
    p_train.add_argument("--max-steps", type=int, default=None,
                         help="stop after this many optimizer steps")
    p_train.add_argument("overrides", nargs="*",
                         help="config overrides as section.key=value")

    p_infer = sub.add_parser("infer", help="dump depth/pose/intrinsics predictions")
    p_infer.add_argument("--checkpoint", required=True)
    p_infer.add_argument("--manifest", required=True)
    p_infer.add_argument("--out", required=True)

    p_ed = sub.add_parser("eval-depth", help="depth metrics over dump directories")
    p_ed.add_argument("--pred-dir", required=True)
    p_ed.add_argument("--gt-dir", required=True)
    p_ed.add_argument("--cap", type=float, default=evalkit.DEFAULT_DEPTH_CAP)
    p_ed.add_argument("--no-median-scaling", action="store_true")
    p_ed.add_argument("--out", default=None, help="results file (default: pred dir)")

    p_ep = sub.add_parser("eval-pose", help="5-frame ATE from pose dumps")
    p_ep.add_argument("--pred-dir", required=True)
    p_ep.add_argument("--gt-manifest", required=True)
    p_ep.add_argument("--out", default=None)

    p_ei = sub.add_parser("eval-intrinsics", help="intrinsics percentage error")
    p_ei.add_argument("--pred", action="append", required=True,
                      help="per-sequence intrinsics dump (repeatable)")
    p_ei.add_argument("--gt", default=None, help='"fx fy cx cy" normalized')
    p_ei.add_argument("--gt-manifest", default=None,
                      help="manifest carrying ground-truth intrinsics")
    p_ei.add_argument("--out", default=None)

    p_gs = sub.add_parser("gen-synth", help="generate a synthetic sequence")
    p_gs.add_argument("--seed", type=int, required=True)
    p_gs.add_argument("--frames", type=int, required=True)
    p_gs.add_argument("--out", required=True)
    p_gs.add_argument("--height", type=int, default=64)
    p_gs.add_argument("--width", type=int, default=80)
    p_gs.add_argument("--intrinsics", default="0.82 1.02 0.5 0.5",
                      help='"fx fy cx cy" normalized')
    p_gs.add_argument("--static", action="store_true",
                      help="static camera (identity trajectory)")

    p_viz = sub.add_parser("viz", help="color-mapped depth images next to inputs")
    p_viz.add_argument("--pred-dir", required=True, help="EDAC depth dumps")
    p_viz.add_argument("--image-dir", required=True, help="matching input frames")
    p_viz.add_argument("--out", required=True)
    p_viz.add_argument("--count", type=int, default=None,
                       help="only the first N frames")
    return parser


def _load_train_config(args) -> tuple[config_mod.TrainConfig, list]:
    values = config_mod.parse_config_file(args.config)
    values = config_mod.apply_overrides(values, args.overrides)
    cfg = config_mod.build_config(values)
    env_seed = os.environ.get("ENDODAC_SEED")
    if env_seed is not None:
        try:
            cfg = config_mod.build_config({**values, "seed": int(env_seed)})
        except ValueError:
            raise ConfigError(f"ENDODAC_SEED must be an integer, got '{env_seed}'")
    config_dir = Path(args.config).parent
    manifest_paths = [config_dir / m for m in cfg.manifests]
    manifest_paths += [Path(m) for m in args.manifest]
    if not manifest_paths:
        raise ConfigError("no manifests: set data.manifests or pass --manifest")
    manifests = [read_manifest(p) for p in manifest_paths]
    return cfg, manifests


def cmd_train(args) -> int:
    cfg, manifests = _load_train_config(args)
    result = trainer.train(cfg, manifests, args.out, resume_from=args.resume,
                           max_steps=args.max_steps)
    print(f"checkpoints: {len(result.checkpoints)} in {args.out}")
    if result.best_checkpoint:
        print(f"best checkpoint: {result.best_checkpoint}")
    print(f"log: {result.log_path}")
    return 0


def cmd_infer(args) -> int:
    manifest = read_manifest(args.manifest)
    info = trainer.run_inference(args.checkpoint, manifest, args.out)
    print(f"wrote {info['frames']} depth dumps and {info['pairs']} pose dumps to {args.out}")
    return 0


def _matched_depth_files(pred_dir: Path, gt_dir: Path) -> list[tuple[Path, Path]]:
    preds = sorted(pred_dir.glob("*.edac"))
    if not preds:
        raise OSError(f"no .edac depth dumps in {pred_dir}")
    pairs = []
    for p in preds:
        g = gt_dir / p.name
        if not g.exists():
            raise OSError(f"missing ground-truth dump {g}")
        pairs.append((p, g))
    return pairs


def cmd_eval_depth(args) -> int:
    pred_dir, gt_dir = Path(args.pred_dir), Path(args.gt_dir)
    per_frame = []
    for pred_path, gt_path in _matched_depth_files(pred_dir, gt_dir):
        pred = dumps.read_depth(pred_path)
        gt = dumps.read_depth(gt_path)
        mask = evalkit.valid_depth_mask(gt, args.cap)
        if not args.no_median_scaling:
            pred = evalkit.median_scale(pred, gt, mask)
        per_frame.append(evalkit.depth_metrics(pred, gt, depth_cap=args.cap))
    results = {
        key: float(np.mean([getattr(m, key) for m in per_frame]))
        for key in ("abs_rel", "sq_rel", "rmse", "rmse_log", "delta")
    }
    results["frames"] = float(len(per_frame))
    text = dumps.format_results(results, title="eval-depth")
    print(text, end="")
    out = Path(args.out) if args.out else pred_dir / "depth_results.txt"
    out.write_text(text)
    return 0


def cmd_eval_pose(args) -> int:
    pred_dir = Path(args.pred_dir)
    pose_dir = pred_dir / "poses" if (pred_dir / "poses").is_dir() else pred_dir
    pred_files = sorted(pose_dir.glob("*_*.txt"))
    if not pred_files:
        raise OSError(f"no pose dumps in {pose_dir}")
    pred = [dumps.read_pose(p) for p in pred_files]
    manifest = read_manifest(args.gt_manifest)
    if manifest.pose_paths is None:
        raise EvaluationError(f"manifest {args.gt_manifest} has no ground-truth poses")
    gt_abs = [dumps.read_pose(manifest.pose_file(i)) for i in range(len(manifest))]
    gt_rel = [synthetic.relative_pose(gt_abs[i], gt_abs[i + 1])
              for i in range(len(gt_abs) - 1)]
    if len(pred) != len(gt_rel):
        raise EvaluationError(
            f"{len(pred)} predicted pairs vs {len(gt_rel)} ground-truth pairs")
    ate = evalkit.ate_5frame(pred, gt_rel)
    results = {"ate": ate, "snippets": float(len(pred) - 3)}
    text = dumps.format_results(results, title="eval-pose")
    print(text, end="")
    out = Path(args.out) if args.out else pred_dir / "pose_results.txt"
    out.write_text(text)
    return 0


def cmd_eval_intrinsics(args) -> int:
    if (args.gt is None) == (args.gt_manifest is None):
        raise ConfigError("provide exactly one of --gt or --gt-manifest")
    if args.gt is not None:
        gt = [float(t) for t in args.gt.split()]
        if len(gt) != 4:
            raise ConfigError('--gt needs 4 numbers: "fx fy cx cy"')
    else:
        manifest = read_manifest(args.gt_manifest)
        if manifest.intrinsics is None:
            raise EvaluationError(
                f"manifest {args.gt_manifest} has no ground-truth intrinsics")
        gt = list(manifest.intrinsics)
    estimates, lengths = [], []
    for pred_path in args.pred:
        rows = dumps.read_intrinsics(pred_path)
        estimates.append(rows)
        lengths.append(rows.shape[0] + 1)  # pairs + 1 = frames
    errors = evalkit.intrinsics_error(estimates, gt, lengths)
    results = {
        "fx_error_pct": float(errors[0]),
        "fy_error_pct": float(errors[1]),
        "cx_error_pct": float(errors[2]),
        "cy_error_pct": float(errors[3]),
    }
    text = dumps.format_results(results, title="eval-intrinsics")
    print(text, end="")
    if args.out:
        Path(args.out).write_text(text)
    return 0


def cmd_gen_synth(args) -> int:
    intr = [float(t) for t in args.intrinsics.split()]
    if len(intr) != 4:
        raise ConfigError('--intrinsics needs 4 numbers: "fx fy cx cy"')
    traj = synthetic.TrajectorySpec.static() if args.static else None
    manifest = synthetic.generate_synthetic_sequence(
        scene_seed=args.seed, n_frames=args.frames,
        image_size=(args.height, args.width), intrinsics=tuple(intr),
        trajectory=traj, output_dir=args.out)
    print(f"wrote {len(manifest)} frames to {args.out} (manifest.txt included)")
    return 0


def cmd_viz(args) -> int:
    import matplotlib
    from PIL import Image

    pred_dir, image_dir, out = Path(args.pred_dir), Path(args.image_dir), Path(args.out)
    depth_files = sorted(pred_dir.glob("*.edac"))
    if not depth_files:
        raise OSError(f"no .edac depth dumps in {pred_dir}")
    if args.count is not None:
        depth_files = depth_files[:args.count]
    out.mkdir(parents=True, exist_ok=True)
    cmap = matplotlib.colormaps["turbo"]
    images = sorted(p for p in image_dir.iterdir()
                    if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    by_stem = {p.stem: p for p in images}
    written = 0
    for dpath in depth_files:
        depth = dumps.read_depth(dpath)
        inv = 1.0 / np.maximum(depth, 1e-6)
        lo, hi = float(inv.min()), float(inv.max())
        norm = (inv - lo) / (hi - lo) if hi > lo else np.zeros_like(inv)
        colored = (cmap(norm)[..., :3] * 255).astype(np.uint8)  # near = warm
        Image.fromarray(colored).save(out / f"{dpath.stem}_depth.png")
        src = by_stem.get(dpath.stem)
        if src is not None:
            with Image.open(src) as img:
                img.convert("RGB").save(out / f"{dpath.stem}_input.png")
        written += 1
    print(f"wrote {written} visualizations to {out}")
    return 0


_COMMANDS = {
    "train": cmd_train,
    "infer": cmd_infer,
    "eval-depth": cmd_eval_depth,
    "eval-pose": cmd_eval_pose,
    "eval-intrinsics": cmd_eval_intrinsics,
    "gen-synth": cmd_gen_synth,
    "viz": cmd_viz,
}


def run(argv: list[str]) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except NumericAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return 4
    except (ConfigError, EvaluationError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
