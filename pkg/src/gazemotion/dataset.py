"""Dataset files (JSON Lines) and cross-validation splits."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .hand import POSE_DIM
from .synth import HELD_OUT_MOTIONS, MOTIONS, ObjectSpec, TrajectorySample

FORMAT_VERSION = 1
FIELDS = ("v", "subject", "motion", "fps", "frames", "gaze", "objects", "target")
VALIDATIONS = ("CS", "CM", "CSM")
N_FOLDS = 5


class DatasetParseError(ValueError):
    pass


class IncompatibleVersionError(DatasetParseError):
    pass


def sample_to_record(s: TrajectorySample) -> dict:
    return {
        "v": FORMAT_VERSION,
        "subject": int(s.subject),
        "motion": s.motion,
        "fps": int(s.fps),
        "frames": np.asarray(s.frames, dtype=np.float64).tolist(),
        "gaze": np.asarray(s.gaze, dtype=np.float64).tolist(),
        "objects": [{"kind": o.kind, "points": o.points.tolist()} for o in s.objects],
        "target": int(s.target),
    }


def record_to_sample(rec: dict) -> TrajectorySample:
    """Validate one decoded record and turn it into a sample (raises ``ValueError``)."""
    if not isinstance(rec, dict):
        raise ValueError("record is not a JSON object")
    if rec.get("v") != FORMAT_VERSION:
        raise IncompatibleVersionError(f"format version {rec.get('v')!r}, expected {FORMAT_VERSION}")
    missing = [k for k in FIELDS if k not in rec]
    extra = [k for k in rec if k not in FIELDS]
    if missing or extra:
        raise ValueError(f"missing fields {missing}, unexpected fields {extra}")
    if rec["motion"] not in MOTIONS:
        raise ValueError(f"unknown motion {rec['motion']!r}")
    frames = np.asarray(rec["frames"], dtype=np.float64)
    gaze = np.asarray(rec["gaze"], dtype=np.float64)
    if frames.ndim != 2 or frames.shape[1] != POSE_DIM:
        raise ValueError(f"frames must be T x {POSE_DIM}, got {frames.shape}")
    if gaze.shape != (len(frames), 3):
        raise ValueError(f"gaze must be {len(frames)} x 3, got {gaze.shape}")
    if not (np.all(np.isfinite(frames)) and np.all(np.isfinite(gaze))):
        raise ValueError("non-finite coordinates")
    objects = [ObjectSpec(o["kind"], o["points"]) for o in rec["objects"]]
    target = int(rec["target"])
    if not 0 <= target < len(objects):
        raise ValueError(f"target {target} out of range for {len(objects)} objects")
    return TrajectorySample(int(rec["subject"]), rec["motion"], int(rec["fps"]), frames, gaze, objects, target)


def dumps_sample(s: TrajectorySample) -> str:
    return json.dumps(sample_to_record(s), separators=(",", ":"), allow_nan=False)


def write_dataset(samples: Iterable[TrajectorySample], path: str | Path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in samples:
            fh.write(dumps_sample(s))
            fh.write("\n")
            n += 1
    return n


def read_dataset(path: str | Path) -> list[TrajectorySample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(record_to_sample(json.loads(line)))
            except IncompatibleVersionError as exc:
                raise IncompatibleVersionError(f"{path}:{lineno}: {exc}") from exc
            except (ValueError, KeyError, TypeError) as exc:
                raise DatasetParseError(f"{path}:{lineno}: malformed record: {exc}") from exc
    return out


# --------------------------------------------------------------------- splits


def subject_folds(subjects: Iterable[int], n_folds: int = N_FOLDS) -> list[list[int]]:
    ordered = sorted(set(subjects))
    return [list(map(int, chunk)) for chunk in np.array_split(np.array(ordered, dtype=int), n_folds)]


def split(samples: Sequence[TrajectorySample], fold: int, mode: str,
          held_out: Sequence[str] = HELD_OUT_MOTIONS,
          n_folds: int = N_FOLDS) -> tuple[list[TrajectorySample], list[TrajectorySample]]:
    """Train/test partition for one fold.

    Training always uses the subjects outside ``fold`` and never a held-out
    motion, so the three modes share a training set and differ in the test set:
    CS tests the fold's subjects on seen motions, CM the training subjects on
    held-out motions, CSM the fold's subjects on held-out motions.
    """
    if mode not in VALIDATIONS:
        raise ValueError(f"unknown validation mode {mode!r}")
    if not 0 <= fold < n_folds:
        raise ValueError(f"fold must be in [0, {n_folds}), got {fold}")
    subjects = {s.subject for s in samples}
    if len(subjects) < n_folds:
        raise ValueError(f"need >= {n_folds} subjects for {n_folds}-fold splits, got {len(subjects)}")
    if not any(s.motion in held_out for s in samples):
        raise ValueError("dataset has no held-out motion samples")
    test_subjects = set(subject_folds(subjects, n_folds)[fold])
    held = set(held_out)
    train = [s for s in samples if s.subject not in test_subjects and s.motion not in held]
    if mode == "CS":
        test = [s for s in samples if s.subject in test_subjects and s.motion not in held]
    elif mode == "CM":
        test = [s for s in samples if s.subject not in test_subjects and s.motion in held]
    else:
        test = [s for s in samples if s.subject in test_subjects and s.motion in held]
    return train, test


def check_split(train: Sequence[TrajectorySample], test: Sequence[TrajectorySample], mode: str,
                held_out: Sequence[str] = HELD_OUT_MOTIONS) -> list[str]:
    """Return violated split properties (empty list when sound)."""
    problems = []
    if {id(s) for s in train} & {id(s) for s in test}:
        problems.append("a sample appears in both train and test")
    tr_subj, te_subj = {s.subject for s in train}, {s.subject for s in test}
    tr_mot, te_mot = {s.motion for s in train}, {s.motion for s in test}
    if tr_mot & set(held_out):
        problems.append(f"held-out motions in training: {sorted(tr_mot & set(held_out))}")
    if mode in ("CS", "CSM") and tr_subj & te_subj:
        problems.append(f"{mode}: subjects shared between train and test")
    if mode in ("CM", "CSM") and tr_mot & te_mot:
        problems.append(f"{mode}: motions shared between train and test")
    if mode == "CM" and tr_subj != te_subj:
        problems.append("CM: train and test subject sets differ")
    if mode == "CS" and not te_mot <= tr_mot:
        problems.append("CS: test contains motions absent from training")
    return problems
