"""Parametric eye-hand-object grasping trajectories.

World frame: origin at the centre of the table surface, x to the subject's
right, y away from the subject, z up (metres).  The subject sits at the
``y = -TABLE_HALF[1]`` edge with both hands resting palms down.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import hand

MOTIONS = ("pick_bottle", "move_paper", "pick_book", "pick_phone", "pick_pen",
           "pick_earphone", "write_on_paper")
SINGLE_OBJECT_MOTIONS = MOTIONS[:6]
HELD_OUT_MOTIONS = ("pick_book", "write_on_paper")
OBJECT_KINDS = ("bottle", "paper", "book", "phone", "pen", "earphone")
MOTION_OBJECTS = {
    "pick_bottle": ("bottle",), "move_paper": ("paper",), "pick_book": ("book",),
    "pick_phone": ("phone",), "pick_pen": ("pen",), "pick_earphone": ("earphone",),
    "write_on_paper": ("pen", "paper"),
}
GRASP_OF_KIND = {"bottle": "A", "paper": "B", "book": "C", "phone": "C", "pen": "D", "earphone": "D"}
# wrist height above the table at the grasp
GRASP_HEIGHT = {"bottle": 0.08, "paper": 0.025, "book": 0.05, "phone": 0.035, "pen": 0.035,
                "earphone": 0.035}
FOOTPRINT = {"bottle": 0.05, "paper": 0.18, "book": 0.15, "phone": 0.09, "pen": 0.08, "earphone": 0.05}
MAX_OBJECTS = 3
MAX_POINTS = 4

FPS = 30
TABLE_HALF = np.array([0.6, 0.4])
PLACEMENT_X = (-0.45, 0.45)
PLACEMENT_Y = (-0.05, 0.32)
REST_RIGHT = np.array([0.20, -0.30, 0.02])
GAZE_JITTER = 0.005
GAZE_JITTER_CLIP = 0.009
REST_JITTER = 0.001
# wrist stops this far short of the object centre, towards the subject
APPROACH_BACKOFF = 0.09
MIN_FRAMES, MAX_FRAMES = 48, 64


class GenerationError(RuntimeError):
    pass


@dataclass
class ObjectSpec:
    kind: str
    points: np.ndarray  # n x 3, 1 <= n <= 4

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.kind not in OBJECT_KINDS:
            raise ValueError(f"unknown object kind {self.kind!r}")
        if not 1 <= len(self.points) <= MAX_POINTS:
            raise ValueError(f"object needs 1..{MAX_POINTS} points, got {len(self.points)}")

    @property
    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)

    def code(self) -> np.ndarray:
        """12-vector with the points in order and trailing slots zero-padded."""
        out = np.zeros(MAX_POINTS * 3)
        out[: self.points.size] = self.points.reshape(-1)
        return out


@dataclass
class SubjectStyle:
    duration: float  # mean reach duration, seconds
    arc_height: float
    arc_lateral: float
    gaze_latency: int  # frames before the saccade starts
    grasp_offset: np.ndarray  # constant wrist offset at the grasp, metres
    rest_offset: np.ndarray
    right_handed: bool


@dataclass
class SceneSpec:
    subject_id: int
    motion: str
    objects: list[ObjectSpec]
    target_index: int
    handedness: str  # left | right | both
    table_origin: np.ndarray = field(default_factory=lambda: np.zeros(3))
    table_half_extents: np.ndarray = field(default_factory=lambda: TABLE_HALF.copy())

    @property
    def target(self) -> ObjectSpec:
        return self.objects[self.target_index]


@dataclass
class TrajectorySample:
    subject: int
    motion: str
    fps: int
    frames: np.ndarray  # T x 126
    gaze: np.ndarray  # T x 3
    objects: list[ObjectSpec]
    target: int
    scene: SceneSpec | None = None

    @property
    def T(self) -> int:
        return len(self.frames)


@dataclass
class NoiseSpec:
    mean_error: float
    seed: int = 0

    def __post_init__(self):
        if self.mean_error < 0:
            raise ValueError(f"noise mean error must be >= 0, got {self.mean_error}")

    @property
    def sigma(self) -> float:
        return noise_sigma(self.mean_error)


def noise_sigma(mean_error: float) -> float:
    """Per-axis std whose isotropic 3-D Gaussian has mean displacement norm ``mean_error``."""
    return mean_error * math.sqrt(math.pi / 8.0)


def add_joint_noise(frames: np.ndarray, spec: NoiseSpec | float, rng: np.random.Generator | None = None) -> np.ndarray:
    """Independent 3-D Gaussian displacement for every joint of every frame.

    With ``rng`` omitted the noise stream is seeded from ``spec.seed`` so paired
    runs see identical corruption.
    """
    if not isinstance(spec, NoiseSpec):
        spec = NoiseSpec(float(spec))
    frames = np.asarray(frames, dtype=np.float64)
    if spec.mean_error == 0:
        return frames.copy()
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    return frames + rng.normal(0.0, spec.sigma, size=frames.shape)


# ----------------------------------------------------------------- kinematics


def min_jerk(u):
    """Normalised minimum-jerk position profile s(u) = 10u^3 - 15u^4 + 6u^5."""
    u = np.clip(u, 0.0, 1.0)
    return u ** 3 * (10.0 - 15.0 * u + 6.0 * u * u)


def wrist_path(start: np.ndarray, goal: np.ndarray, arc_height: float, arc_lateral: float):
    """Return ``p(s)`` for s in [0, 1]: straight reach plus a sin(pi s) bulge orthogonal to it.

    The bulge is orthogonal to the chord, so speed along the path is symmetric
    about s = 0.5 and the path midpoint sits at s = 0.5.
    """
    d = goal - start
    dn = d / max(np.linalg.norm(d), 1e-9)
    up = np.array([0.0, 0.0, 1.0]) - dn[2] * dn
    up /= max(np.linalg.norm(up), 1e-9)
    side = np.cross(dn, up)
    bulge = arc_height * up + arc_lateral * side

    def p(s):
        s = np.asarray(s, dtype=np.float64)[..., None]
        return start + s * d + np.sin(np.pi * s) * bulge

    return p


def rest_wrist(left: bool, style: SubjectStyle) -> np.ndarray:
    w = REST_RIGHT + style.rest_offset
    return w * np.array([-1.0, 1.0, 1.0]) if left else w.copy()


def grasp_point(obj: ObjectSpec, start: np.ndarray, point: np.ndarray | None = None) -> np.ndarray:
    """Wrist position at contact: behind the grasped point as seen from ``start``."""
    c = obj.centroid if point is None else point
    d = c[:2] - start[:2]
    d = d / max(np.linalg.norm(d), 1e-9)
    g = np.array([c[0] - APPROACH_BACKOFF * d[0], c[1] - APPROACH_BACKOFF * d[1], GRASP_HEIGHT[obj.kind]])
    return g


# ---------------------------------------------------------------------- scene


def draw_subject_style(rng: np.random.Generator) -> SubjectStyle:
    return SubjectStyle(
        duration=float(rng.uniform(1.6, 2.0)),
        arc_height=float(rng.uniform(0.03, 0.09)),
        arc_lateral=float(rng.uniform(-0.03, 0.03)),
        gaze_latency=int(rng.integers(1, 4)),
        grasp_offset=rng.uniform(-0.006, 0.006, size=3),
        rest_offset=np.array([rng.uniform(-0.03, 0.03), rng.uniform(-0.03, 0.03), 0.0]),
        right_handed=bool(rng.random() < 0.8),
    )


def _object_points(kind: str, xy: np.ndarray, yaw: float, rng: np.random.Generator,
                   paired: bool = False) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    R = np.array([[c, -s], [s, c]])

    def rect(w, h):
        corners = np.array([[-w / 2, -h / 2], [w / 2, -h / 2], [w / 2, h / 2], [-w / 2, h / 2]])
        pts = corners @ R.T + xy
        return np.column_stack([pts, np.zeros(4)])

    if kind == "bottle":
        return np.array([[xy[0], xy[1], 0.0], [xy[0], xy[1], 0.22]])
    if kind == "paper":
        return rect(0.21, 0.297)
    if kind == "book":
        return rect(0.17, 0.24)
    if kind == "phone":
        return rect(0.07, 0.15)
    if kind == "pen":
        half = np.array([0.07, 0.0]) @ R.T
        return np.array([[*(xy + half), 0.005], [*(xy - half), 0.005]])
    if kind == "earphone":
        if paired:
            half = np.array([0.06, 0.0]) @ R.T
            return np.array([[*(xy - half), 0.01], [*(xy + half), 0.01]])
        return np.array([[xy[0], xy[1], 0.01]])
    raise ValueError(kind)


def generate_scene(rng: np.random.Generator, motion: str, subject_id: int,
                   style: SubjectStyle | None = None) -> SceneSpec:
    """Target object(s) plus 1-2 distractors at non-overlapping table positions.

    Objects are stored in random order; ``target_index`` names the grasped one.
    """
    if motion not in MOTIONS:
        raise ValueError(f"unknown motion {motion!r}")
    style = style or draw_subject_style(rng)
    kinds = list(MOTION_OBJECTS[motion])
    n_distractors = 1 if len(kinds) == 2 else int(rng.integers(1, 3))
    pool = [k for k in OBJECT_KINDS if k not in kinds]
    kinds += list(rng.choice(pool, size=n_distractors, replace=False))
    paired = motion == "pick_earphone" and bool(rng.random() < 0.3)

    placed: list[tuple[np.ndarray, float]] = []
    objects: list[ObjectSpec] = []
    for i, kind in enumerate(kinds):
        radius = FOOTPRINT[kind] * (2.0 if kind == "earphone" and paired and i == 0 else 1.0)
        for _ in range(200):
            x_hi = min(PLACEMENT_X[1], TABLE_HALF[0] - radius)
            y_hi = min(PLACEMENT_Y[1], TABLE_HALF[1] - radius)
            xy = np.array([rng.uniform(-x_hi, x_hi), rng.uniform(PLACEMENT_Y[0], y_hi)])
            if all(np.linalg.norm(xy - q) >= radius + r for q, r in placed):
                break
        else:
            raise GenerationError(f"could not place {kind} without overlap")
        placed.append((xy, radius))
        yaw = float(rng.uniform(-0.6, 0.6))
        objects.append(ObjectSpec(kind, _object_points(kind, xy, yaw, rng, paired and i == 0)))

    order = rng.permutation(len(objects))
    objects = [objects[j] for j in order]
    target_index = int(np.flatnonzero(order == 0)[0])
    if motion == "write_on_paper" or paired:
        handedness = "both"
    else:
        handedness = "right" if style.right_handed else "left"
    return SceneSpec(subject_id, motion, objects, target_index, handedness)


def _hand_plan(scene: SceneSpec, style: SubjectStyle):
    """(left?, goal object, contact point) for every moving hand."""
    tgt = scene.target
    plans = []
    if scene.motion == "write_on_paper":
        paper = next(o for o in scene.objects if o.kind == "paper")
        writing_left = not style.right_handed
        plans.append((writing_left, tgt, None))
        # the other hand holds the paper at its corner nearest to that hand
        start = rest_wrist(not writing_left, style)
        corner = paper.points[np.argmin(np.linalg.norm(paper.points[:, :2] - start[:2], axis=1))]
        plans.append((not writing_left, paper, 0.6 * corner + 0.4 * paper.centroid))
    elif scene.handedness == "both":
        pts = tgt.points[np.argsort(tgt.points[:, 0])]
        plans.append((True, tgt, pts[0]))
        plans.append((False, tgt, pts[-1]))
    else:
        plans.append((scene.handedness == "left", tgt, None))
    return plans


def synth_trajectory(scene: SceneSpec, T: int, rng: np.random.Generator,
                     style: SubjectStyle | None = None, fps: int = FPS) -> TrajectorySample:
    """Minimum-jerk reach(es) with closing fingers and a saccade-then-fixate gaze."""
    if T < 16:
        raise ValueError(f"trajectory needs T >= 16 frames, got {T}")
    style = style or draw_subject_style(rng)
    for obj in scene.objects:
        if np.any(np.abs(obj.points[:, :2]) > scene.table_half_extents):
            raise GenerationError(f"{obj.kind} lies outside the table extents")

    u = np.arange(T) / (T - 1)
    s = min_jerk(u)
    closure = min_jerk((s - 0.75) / 0.25)
    joints = np.zeros((T, 2, hand.N_JOINTS, 3))
    moving = set()
    for left, obj, point in _hand_plan(scene, style):
        side = 0 if left else 1
        moving.add(side)
        start = rest_wrist(left, style)
        goal = grasp_point(obj, start, point) + style.grasp_offset * np.array([-1.0 if left else 1.0, 1.0, 1.0])
        lateral = -style.arc_lateral if left else style.arc_lateral
        path = wrist_path(start, goal, style.arc_height, lateral)
        wrists = path(s)
        d = goal[:2] - start[:2]
        heading = math.atan2(-d[0], d[1])  # yaw that points the fingers at the goal
        grasp = hand.GRASP_TYPES[GRASP_OF_KIND[obj.kind]]
        joints[:, side] = hand.hand_pose(wrists, 0.5 * heading * s, grasp["roll"] * closure,
                                         GRASP_OF_KIND[obj.kind], closure, left=left)
    for side in (0, 1):
        if side in moving:
            continue
        base = hand.hand_pose(rest_wrist(side == 0, style), 0.0, 0.0, "B", 0.0, left=side == 0)
        jitter = rng.normal(0.0, REST_JITTER, size=(T, 1, 3))
        joints[:, side] = base[None] + jitter

    gaze = _gaze(scene, style, T, rng)
    frames = joints.reshape(T, hand.POSE_DIM)
    return TrajectorySample(scene.subject_id, scene.motion, fps, frames, gaze,
                            scene.objects, scene.target_index, scene)


def _gaze(scene: SceneSpec, style: SubjectStyle, T: int, rng: np.random.Generator) -> np.ndarray:
    start = np.array([0.0, -0.1, 0.0]) + np.array([*rng.normal(0.0, 0.03, size=2), 0.0])
    target = scene.target.centroid
    onset = style.gaze_latency + int(rng.integers(0, 2))
    saccade = 2
    t = np.arange(T)
    a = np.clip((t - onset) / saccade, 0.0, 1.0)[:, None]
    jitter = rng.normal(0.0, GAZE_JITTER, size=(T, 3))
    norms = np.linalg.norm(jitter, axis=1, keepdims=True)
    jitter *= np.minimum(1.0, GAZE_JITTER_CLIP / np.maximum(norms, 1e-12))
    return (1 - a) * start + a * target + jitter


def sample_duration_frames(style: SubjectStyle, rng: np.random.Generator, fps: int = FPS) -> int:
    dur = style.duration + rng.normal(0.0, 0.06)
    T = 4 * int(round(fps * dur / 4))
    return int(np.clip(T, MIN_FRAMES, MAX_FRAMES))


# -------------------------------------------------------------------- dataset


def subject_rng(seed: int, subject: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 1, subject]))


def sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 2, index]))


def build_dataset(n_subjects: int = 15, grasps_per_object: int = 5, seed: int = 0,
                  fps: int = FPS) -> list[TrajectorySample]:
    """Per subject: ``grasps_per_object`` grasps of each single-object motion plus one bimanual write.

    Every sample draws from its own stream keyed by (seed, sample index), so the
    corpus is a pure function of the arguments.
    """
    if n_subjects < 0 or grasps_per_object < 1:
        raise ValueError("need n_subjects >= 0 and grasps_per_object >= 1")
    out: list[TrajectorySample] = []
    index = 0
    for subject in range(n_subjects):
        style = draw_subject_style(subject_rng(seed, subject))
        plan = [m for m in SINGLE_OBJECT_MOTIONS for _ in range(grasps_per_object)] + ["write_on_paper"]
        for motion in plan:
            rng = sample_rng(seed, index)
            scene = generate_scene(rng, motion, subject, style)
            T = sample_duration_frames(style, rng, fps)
            out.append(synth_trajectory(scene, T, rng, style, fps))
            index += 1
    return out
