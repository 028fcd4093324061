"""Position and angle errors between ground-truth and predicted hand trajectories."""

from __future__ import annotations

import numpy as np

from .autodiff import ContractError
from .hand import active_hands, palm_positions


class UndefinedAngleError(ValueError):
    pass


def avg_position_error(P: np.ndarray, P_hat: np.ndarray) -> float:
    """Mean Euclidean distance between matching rows of two ``T x 3`` paths."""
    P = np.asarray(P, dtype=np.float64)
    P_hat = np.asarray(P_hat, dtype=np.float64)
    if P.shape != P_hat.shape:
        raise ContractError(f"length mismatch: {P.shape} vs {P_hat.shape}")
    if len(P) == 0:
        raise ContractError("empty trajectories")
    return float(np.linalg.norm(P - P_hat, axis=-1).mean())


def end_pose_error(P: np.ndarray, P_hat: np.ndarray) -> float:
    """Distance between the final points of two paths."""
    if len(P) == 0 or len(P_hat) == 0:
        raise ContractError("empty trajectories")
    return float(np.linalg.norm(np.asarray(P[-1], dtype=np.float64) - np.asarray(P_hat[-1], dtype=np.float64)))


def key_pose_angle_error(start, gt_end, pred_end) -> float:
    """Angle in radians between ``gt_end - start`` and ``pred_end - start``."""
    start = np.asarray(start, dtype=np.float64)
    a = np.asarray(gt_end, dtype=np.float64) - start
    b = np.asarray(pred_end, dtype=np.float64) - start
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise UndefinedAngleError("zero-length direction vector")
    # atan2 of sine and cosine stays accurate near 0 and pi, where arccos does not
    return float(np.arctan2(np.linalg.norm(np.cross(a, b)), np.dot(a, b)))


def trajectory_metrics(gt_frames: np.ndarray, pred_frames: np.ndarray, first: int) -> dict[str, float | None]:
    """All metrics on frames ``first..T-1`` of full-length ``T x 126`` sequences.

    Palms are taken over the hands that move in the ground truth.  The angle is
    measured from the ground-truth palm at frame 0 and is ``None`` when undefined.
    """
    if gt_frames.shape != pred_frames.shape:
        raise ContractError(f"shape mismatch: {gt_frames.shape} vs {pred_frames.shape}")
    hands = active_hands(gt_frames)
    P = palm_positions(gt_frames, hands)
    P_hat = palm_positions(pred_frames, hands)
    out: dict[str, float | None] = {
        "avg_position": avg_position_error(P[first:], P_hat[first:]),
        "end_pose": end_pose_error(P, P_hat),
    }
    try:
        out["key_pose_angle"] = key_pose_angle_error(P[0], P[-1], P_hat[-1])
    except UndefinedAngleError:
        out["key_pose_angle"] = None
    return out
