"""Depth metrics with median scaling, 5-frame trajectory error, intrinsics error."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import EvaluationError

DEFAULT_DEPTH_CAP = 150.0
PRED_DEPTH_FLOOR = 1e-3


@dataclass
class DepthMetrics:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    delta: float

    def as_dict(self) -> dict:
        return {"abs_rel": self.abs_rel, "sq_rel": self.sq_rel, "rmse": self.rmse,
                "rmse_log": self.rmse_log, "delta": self.delta}


def valid_depth_mask(gt: np.ndarray, depth_cap: float = DEFAULT_DEPTH_CAP) -> np.ndarray:
    return (gt > 0) & (gt < depth_cap)


def depth_metrics(pred: np.ndarray, gt: np.ndarray,
                  valid_mask: np.ndarray | None = None,
                  depth_cap: float = DEFAULT_DEPTH_CAP) -> DepthMetrics:
    """Abs Rel, Sq Rel, RMSE, RMSE log and the delta < 1.25 inlier fraction.

    Predictions are clamped to [1e-3, depth_cap] before scoring; errors that
    divide by ground truth use the unclamped ground truth.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise EvaluationError(f"pred shape {pred.shape} != gt shape {gt.shape}")
    mask = valid_depth_mask(gt, depth_cap)
    if valid_mask is not None:
        mask = mask & valid_mask.astype(bool)
    if not mask.any():
        raise EvaluationError("no valid pixels to evaluate")
    p = np.clip(pred[mask], PRED_DEPTH_FLOOR, depth_cap)
    g = gt[mask]
    diff = g - p
    ratio = np.maximum(g / p, p / g)
    return DepthMetrics(
        abs_rel=float(np.mean(np.abs(diff) / g)),
        sq_rel=float(np.mean(diff ** 2 / g)),
        rmse=float(np.sqrt(np.mean(diff ** 2))),
        rmse_log=float(np.sqrt(np.mean((np.log(g) - np.log(p)) ** 2))),
        delta=float(np.mean(ratio < 1.25)),
    )


def median_scale(pred: np.ndarray, gt: np.ndarray,
                 mask: np.ndarray | None = None) -> np.ndarray:
    """Rescale pred so its median over the mask matches ground truth's."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if mask is None:
        mask = np.ones_like(gt, dtype=bool)
    if not mask.any():
        raise EvaluationError("empty mask for median scaling")
    med_pred = np.median(pred[mask])
    med_gt = np.median(gt[mask])
    if med_pred <= 0:
        raise EvaluationError(f"non-positive prediction median {med_pred}")
    return pred * (med_gt / med_pred)


def _compose_positions(rel_poses: Sequence[np.ndarray]) -> np.ndarray:
    """Chain relative poses into positions starting at the origin."""
    current = np.eye(4)
    positions = [current[:3, 3].copy()]
    for rel in rel_poses:
        current = current @ rel
        positions.append(current[:3, 3].copy())
    return np.array(positions)


def ate_snippet(gt_xyz: np.ndarray, pred_xyz: np.ndarray) -> float:
    """RMSE of translations after a single least-squares scale on predictions."""
    denom = np.sum(pred_xyz ** 2)
    scale = np.sum(gt_xyz * pred_xyz) / denom if denom > 0 else 1.0
    err = pred_xyz * scale - gt_xyz
    return float(np.sqrt(np.mean(np.sum(err ** 2, axis=1))))


def ate_5frame(pred_poses: Sequence[np.ndarray], gt_poses: Sequence[np.ndarray]) -> float:
    """5-frame ATE: each snippet composes 4 consecutive relative poses
    (5 frames), scale-aligns the predicted translations, and the per-snippet
    RMSEs are averaged."""
    pred = [np.asarray(p, dtype=np.float64) for p in pred_poses]
    gt = [np.asarray(p, dtype=np.float64) for p in gt_poses]
    if len(pred) != len(gt):
        raise EvaluationError(f"{len(pred)} predicted vs {len(gt)} ground-truth poses")
    if len(pred) < 4:
        raise EvaluationError(
            f"5-frame evaluation needs at least 5 frames (4 relative poses), got {len(pred)}")
    ates = []
    for i in range(len(pred) - 3):
        pred_xyz = _compose_positions(pred[i:i + 4])
        gt_xyz = _compose_positions(gt[i:i + 4])
        ates.append(ate_snippet(gt_xyz, pred_xyz))
    return float(np.mean(ates))


def intrinsics_error(estimates_per_sequence: Sequence[np.ndarray],
                     gt: Sequence[float],
                     sequence_lengths: Sequence[int]) -> np.ndarray:
    """Percentage error of the frame-count-weighted cross-sequence mean estimate.

    estimates_per_sequence: one (n_pairs, 4) array of normalized (fx, fy, cx, cy)
    rows per sequence. Returns the 4 percentage errors.
    """
    if len(estimates_per_sequence) == 0:
        raise EvaluationError("no sequences to evaluate")
    if len(estimates_per_sequence) != len(sequence_lengths):
        raise EvaluationError("sequence estimate/length count mismatch")
    gt = np.asarray(gt, dtype=np.float64)
    if gt.shape != (4,):
        raise EvaluationError(f"ground truth must be 4 values, got shape {gt.shape}")
    if np.any(gt == 0):
        raise EvaluationError("ground-truth intrinsics contain a zero component")
    means, weights = [], []
    for est, n in zip(estimates_per_sequence, sequence_lengths):
        est = np.asarray(est, dtype=np.float64).reshape(-1, 4)
        if est.shape[0] < 1:
            raise EvaluationError("a sequence has no intrinsics estimates")
        means.append(est.mean(axis=0))
        weights.append(float(n))
    weighted = np.average(np.array(means), axis=0, weights=np.array(weights))
    return np.abs(weighted - gt) / np.abs(gt) * 100.0
