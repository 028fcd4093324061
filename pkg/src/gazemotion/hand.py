"""Schematic 21-joint hand skeleton (MediaPipe joint order) and grasp poses.

Local frame of a right hand lying palm down: wrist at the origin, fingers along
+y, thumb towards -x, back of the hand facing +z.  Left hands are produced by
mirroring x.
"""

from __future__ import annotations

import numpy as np

N_JOINTS = 21
POSE_DIM = 2 * N_JOINTS * 3  # both hands x 21 joints x xyz

WRIST = 0
# wrist plus the five finger-base joints (thumb CMC and the four MCPs)
PALM_JOINTS = (0, 1, 5, 9, 13, 17)
FINGERS = {
    "thumb": (1, 2, 3, 4),
    "index": (5, 6, 7, 8),
    "middle": (9, 10, 11, 12),
    "ring": (13, 14, 15, 16),
    "pinky": (17, 18, 19, 20),
}

FLAT_RIGHT = np.array([
    [0.000, 0.000, 0.0],
    [-0.025, 0.025, 0.0], [-0.045, 0.045, 0.0], [-0.060, 0.065, 0.0], [-0.070, 0.085, 0.0],
    [-0.022, 0.090, 0.0], [-0.024, 0.130, 0.0], [-0.025, 0.155, 0.0], [-0.026, 0.175, 0.0],
    [0.000, 0.092, 0.0], [0.000, 0.135, 0.0], [0.000, 0.162, 0.0], [0.000, 0.185, 0.0],
    [0.020, 0.088, 0.0], [0.021, 0.127, 0.0], [0.022, 0.152, 0.0], [0.023, 0.170, 0.0],
    [0.038, 0.080, 0.0], [0.041, 0.110, 0.0], [0.043, 0.128, 0.0], [0.045, 0.145, 0.0],
])

# flexion (base, middle, distal) in radians per finger, plus wrist roll
GRASP_TYPES: dict[str, dict] = {
    # cylindrical power grasp
    "A": {"flex": {"thumb": (0.5, 0.4, 0.3), "index": (0.9, 1.1, 0.6), "middle": (0.9, 1.1, 0.6),
                   "ring": (0.9, 1.1, 0.6), "pinky": (0.9, 1.1, 0.6)}, "roll": 1.2},
    # flat press / slide
    "B": {"flex": {"thumb": (0.1, 0.1, 0.05), "index": (0.2, 0.2, 0.1), "middle": (0.2, 0.2, 0.1),
                   "ring": (0.2, 0.2, 0.1), "pinky": (0.2, 0.2, 0.1)}, "roll": 0.0},
    # prismatic grasp of a flat box
    "C": {"flex": {"thumb": (0.6, 0.4, 0.3), "index": (0.6, 0.5, 0.3), "middle": (0.6, 0.5, 0.3),
                   "ring": (0.6, 0.5, 0.3), "pinky": (0.6, 0.5, 0.3)}, "roll": 0.3},
    # precision pinch, remaining fingers tucked
    "D": {"flex": {"thumb": (0.7, 0.6, 0.4), "index": (0.5, 0.8, 0.5), "middle": (1.2, 1.3, 0.8),
                   "ring": (1.2, 1.3, 0.8), "pinky": (1.2, 1.3, 0.8)}, "roll": 0.0},
}


def local_pose(grasp: str, closure) -> np.ndarray:
    """Right-hand joints in the local frame with fingers flexed by ``closure`` in [0, 1].

    ``closure`` may be a scalar (returns 21 x 3) or an array of shape (T,) (returns T x 21 x 3).
    """
    flex = GRASP_TYPES[grasp]["flex"]
    c = np.asarray(closure, dtype=np.float64)
    scalar = c.ndim == 0
    c = c.reshape(-1)
    pose = np.repeat(FLAT_RIGHT[None], len(c), axis=0)
    down = np.array([0.0, 0.0, -1.0])
    for name, chain in FINGERS.items():
        angles = c[:, None] * np.asarray(flex[name])[None, :]
        phi = np.zeros(len(c))
        prev = pose[:, chain[0]]
        for seg, j in enumerate(chain[1:]):
            vec = FLAT_RIGHT[j] - FLAT_RIGHT[chain[seg]]
            length = np.linalg.norm(vec)
            d = vec / length
            phi = phi + angles[:, seg]
            step = length * (np.cos(phi)[:, None] * d + np.sin(phi)[:, None] * down)
            pose[:, j] = prev + step
            prev = pose[:, j]
    return pose[0] if scalar else pose


def hand_pose(wrist, yaw, roll, grasp: str, closure, left: bool = False) -> np.ndarray:
    """World-frame joints for one hand: 21 x 3, or T x 21 x 3 when the inputs are per-frame arrays.

    The hand is rolled about its finger axis, then turned about the vertical.
    """
    local = local_pose(grasp, closure)
    single = local.ndim == 2
    local = local.reshape(-1, N_JOINTS, 3)
    yaw = np.broadcast_to(np.asarray(yaw, dtype=np.float64), (len(local),))
    roll = np.broadcast_to(np.asarray(roll, dtype=np.float64), (len(local),))
    if left:
        local = local * np.array([-1.0, 1.0, 1.0])
        roll = -roll
    cy, sy, cr, sr = np.cos(yaw), np.sin(yaw), np.cos(roll), np.sin(roll)
    # rolled = R_y(roll) @ p
    x = cr[:, None] * local[..., 0] + sr[:, None] * local[..., 2]
    y = local[..., 1]
    z = -sr[:, None] * local[..., 0] + cr[:, None] * local[..., 2]
    out = np.stack([cy[:, None] * x - sy[:, None] * y, sy[:, None] * x + cy[:, None] * y, z], axis=-1)
    out = out + np.asarray(wrist, dtype=np.float64).reshape(-1, 1, 3)
    return out[0] if single else out


def split_hands(frames: np.ndarray) -> np.ndarray:
    """``T x 126`` -> ``T x 2 x 21 x 3`` (index 0 = left hand, 1 = right hand)."""
    frames = np.asarray(frames)
    return frames.reshape(frames.shape[0], 2, N_JOINTS, 3)


def palm_positions(frames: np.ndarray, hands: tuple[int, ...]) -> np.ndarray:
    """Palm point per frame: mean of wrist and finger-base joints, averaged over ``hands``."""
    j = split_hands(frames)[:, list(hands)][:, :, list(PALM_JOINTS)]
    return j.mean(axis=(1, 2))


def active_hands(frames: np.ndarray, min_travel: float = 0.05) -> tuple[int, ...]:
    """Hands whose wrist travels more than ``min_travel`` metres from first to last frame.

    Falls back to the hand that moved furthest when neither clears the bar.
    """
    j = split_hands(frames)
    travel = np.linalg.norm(j[-1, :, WRIST] - j[0, :, WRIST], axis=-1)
    moved = tuple(int(h) for h in np.flatnonzero(travel > min_travel))
    return moved if moved else (int(np.argmax(travel)),)
