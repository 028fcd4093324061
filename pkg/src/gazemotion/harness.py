"""Cross-validated experiment grid: input-frame sweep, fusion ablation, noise sweep, VQ-VAE floor."""

from __future__ import annotations

import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .autodiff import NumericalError, TrainingError
from .dataset import N_FOLDS, VALIDATIONS, check_split, split
from .generator import (FUSIONS, GeneratorConfig, MotionGenerator, pool_gaze, rollout_batch,
                        train_generator)
from .metrics import trajectory_metrics
from .synth import TrajectorySample, add_joint_noise
from .vqvae import MotionVqVae, VqVaeConfig, train_vqvae

log = logging.getLogger(__name__)

METRICS = ("avg_position", "end_pose", "key_pose_angle")
FLOOR_METRICS = {"end_pose": "vqvae_floor", "avg_position": "vqvae_floor_avg_position",
                 "key_pose_angle": "vqvae_floor_key_pose_angle"}
UNITS = {"avg_position": "m", "end_pose": "m", "key_pose_angle": "rad", "vqvae_floor": "m",
         "vqvae_floor_avg_position": "m", "vqvae_floor_key_pose_angle": "rad", "error": ""}
NOISE_LEVELS = (0.0, 0.1, 0.15, 0.2, 0.25, 0.3)
NOISE_INPUT_FRAMES = 8  # the shortest observed prefix
PALM_DEFINITION = "mean of wrist and five finger-base joints of the moving hand(s)"


@dataclass
class ExperimentGrid:
    input_frames: list[int] = field(default_factory=lambda: list(range(8, 45, 4)))
    fusions: list[str] = field(default_factory=lambda: ["linear"])
    gaze: list[bool] = field(default_factory=lambda: [True, False])
    validations: list[str] = field(default_factory=lambda: list(VALIDATIONS))
    noise_levels: list[float] = field(default_factory=lambda: [0.0])
    folds: list[int] = field(default_factory=lambda: list(range(N_FOLDS)))
    seeds: list[int] = field(default_factory=lambda: [0])

    def validate(self, l: int = 4) -> None:
        bad = [f for f in self.input_frames if f < l or f % l]
        if bad or not self.input_frames:
            raise ValueError(f"input_frames must be non-empty multiples of l={l}; bad: {bad}")
        if not set(self.fusions) <= set(FUSIONS) or not self.fusions:
            raise ValueError(f"fusions must be drawn from {FUSIONS}")
        if not set(self.validations) <= set(VALIDATIONS) or not self.validations:
            raise ValueError(f"validations must be drawn from {VALIDATIONS}")
        if any(e < 0 for e in self.noise_levels) or not self.noise_levels:
            raise ValueError("noise levels must be non-negative")
        if not self.gaze or not self.seeds or not self.folds:
            raise ValueError("gaze, seeds and folds must be non-empty")
        if any(not 0 <= k < N_FOLDS for k in self.folds):
            raise ValueError(f"folds must lie in [0, {N_FOLDS})")

    @classmethod
    def noise_sweep(cls, **kw) -> "ExperimentGrid":
        return cls(input_frames=[NOISE_INPUT_FRAMES], noise_levels=list(NOISE_LEVELS), **kw)

    @classmethod
    def ablation(cls, **kw) -> "ExperimentGrid":
        return cls(fusions=list(FUSIONS), gaze=[True], **kw)


@dataclass(frozen=True)
class MetricRow:
    validation: str
    fold: int | str
    fusion: str
    gaze: bool
    input_frames: int
    noise_e: float
    metric: str
    value: float
    units: str

    def key(self):
        return (self.validation, str(self.fold), self.fusion, self.gaze, self.input_frames,
                self.noise_e, self.metric)


@dataclass
class MetricReport:
    seed: int
    rows: list[MetricRow] = field(default_factory=list)
    failures: list[str] = field(default_factory=list)
    violations: list[str] = field(default_factory=list)
    skipped_angles: int = 0
    meta: dict = field(default_factory=dict)

    def sort(self) -> None:
        self.rows.sort(key=MetricRow.key)

    def lookup(self, **match) -> list[MetricRow]:
        return [r for r in self.rows if all(getattr(r, k) == v for k, v in match.items())]


@dataclass
class UnitResult:
    seed: int
    fold: int
    rows: list[MetricRow]
    failures: list[str]
    violations: list[str]
    skipped_angles: int
    seconds: float


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


# ------------------------------------------------------------------ evaluation


def noisy_inputs(frames: np.ndarray, e: float, seed: int, sample_id: int) -> np.ndarray:
    """Corrupt observed frames; the stream depends only on (seed, sample, e) so runs pair up."""
    if e == 0:
        return frames
    rng = np.random.default_rng([int(seed), int(sample_id), int(round(e * 1e6))])
    return add_joint_noise(frames, e, rng)


def vqvae_floor(vq: MotionVqVae, test: Sequence[TrajectorySample]) -> tuple[dict[str, float], int]:
    """Mean metrics of plain encode/quantize/decode reconstructions over all frames."""
    vals: dict[str, list[float]] = {m: [] for m in METRICS}
    skipped = 0
    for s in test:
        rec = vq.reconstruct(s.frames)
        for k, v in trajectory_metrics(s.frames, rec, 0).items():
            if v is None:
                skipped += 1
            else:
                vals[k].append(v)
    return {k: float(np.mean(v)) if v else math.nan for k, v in vals.items()}, skipped


def predict_sequences(vq: MotionVqVae, gen: MotionGenerator, test: Sequence[TrajectorySample],
                      input_frames: int, noise_e: float = 0.0, seed: int = 0,
                      sample_ids: Sequence[int] | None = None) -> list[np.ndarray]:
    """Full-length predictions (``T x 126``) from the first ``input_frames`` of each sample."""
    l = vq.l
    if input_frames % l or input_frames < l:
        raise ValueError(f"input frames must be a positive multiple of l={l}, got {input_frames}")
    ids = list(range(len(test))) if sample_ids is None else list(sample_ids)
    usable = [s for s in test if len(s.frames) > input_frames]
    if len(usable) != len(test):
        raise ValueError(f"every test sample needs more than {input_frames} frames")
    obs = [noisy_inputs(s.frames[:input_frames], noise_e, seed, i) for s, i in zip(test, ids)]
    lat = vq.encode_batch(obs)
    tokens = vq.quantize(lat).indices
    gaze = None
    if gen.config.gaze:
        gaze = np.stack([gen.normalize_gaze(pool_gaze(s.gaze[:input_frames], l)) for s in test])
    objects = np.stack([gen.normalize_objects(s.objects) for s in test])
    horizons = [len(s.frames) // l - tokens.shape[1] for s in test]
    seqs = rollout_batch(gen, tokens, gaze, objects, horizons)
    out: list[np.ndarray | None] = [None] * len(test)
    by_len: dict[int, list[int]] = {}
    for i, sq in enumerate(seqs):
        by_len.setdefault(len(sq), []).append(i)
    for _, idxs in sorted(by_len.items()):
        Q = vq.codebook[np.stack([seqs[i] for i in idxs])]
        for i, frames in zip(idxs, vq.decode_batch(Q)):
            out[i] = frames[: len(test[i].frames)]
    return out  # type: ignore[return-value]


def evaluate_cell(vq, gen, test, input_frames, noise_e, seed, sample_ids) -> tuple[dict[str, float], int]:
    preds = predict_sequences(vq, gen, test, input_frames, noise_e, seed, sample_ids)
    vals: dict[str, list[float]] = {m: [] for m in METRICS}
    skipped = 0
    for s, p in zip(test, preds):
        for k, v in trajectory_metrics(s.frames, p, input_frames).items():
            if v is None:
                skipped += 1
            else:
                vals[k].append(v)
    return {k: float(np.mean(v)) if v else math.nan for k, v in vals.items()}, skipped


# ------------------------------------------------------------------------ grid


def run_unit(samples: Sequence[TrajectorySample], grid: ExperimentGrid, seed: int, fold: int,
             vq_config: VqVaeConfig, gen_config: GeneratorConfig,
             vq: MotionVqVae | None = None) -> UnitResult:
    """Everything for one (seed, fold): shared VQ-VAE, one generator per (fusion, gaze)."""
    t0 = time.perf_counter()
    rows: list[MetricRow] = []
    failures: list[str] = []
    violations: list[str] = []
    skipped = 0
    ids = {id(s): i for i, s in enumerate(samples)}
    tests = {}
    train: list[TrajectorySample] = []
    for mode in grid.validations:
        train, test = split(samples, fold, mode)
        violations += [f"seed {seed} fold {fold}: {p}" for p in check_split(train, test, mode)]
        tests[mode] = test

    def error_rows(mode, fusion, gaze, msg):
        failures.append(f"seed {seed} fold {fold} {mode} {fusion} gaze={gaze}: {msg}")
        for f in grid.input_frames:
            for e in grid.noise_levels:
                rows.append(MetricRow(mode, fold, fusion, gaze, f, e, "error", math.nan, ""))

    if vq is None:
        try:
            vq, _ = train_vqvae([s.frames for s in train], replace(vq_config, seed=derive_seed(seed, fold, 0)))
        except (TrainingError, NumericalError) as exc:
            for mode in grid.validations:
                for fusion in grid.fusions:
                    for g in grid.gaze:
                        error_rows(mode, fusion, g, f"vqvae: {exc}")
            return UnitResult(seed, fold, rows, failures, violations, 0, time.perf_counter() - t0)

    floors = {}
    for mode, test in tests.items():
        floor, sk = vqvae_floor(vq, test)
        skipped += sk
        floors[mode] = floor
        for metric, name in FLOOR_METRICS.items():
            rows.append(MetricRow(mode, fold, "none", False, 0, 0.0, name, floor[metric], UNITS[name]))

    gen_seed = derive_seed(seed, fold, 1)
    for fusion in grid.fusions:
        for g in grid.gaze:
            cfg = replace(gen_config, fusion=fusion, gaze=g, seed=gen_seed)
            try:
                gen, _ = train_generator(vq, train, cfg)
            except (TrainingError, NumericalError) as exc:
                for mode in grid.validations:
                    error_rows(mode, fusion, g, f"generator: {exc}")
                continue
            for mode, test in tests.items():
                sid = [ids[id(s)] for s in test]
                for f in grid.input_frames:
                    for e in grid.noise_levels:
                        vals, sk = evaluate_cell(vq, gen, test, f, e, seed, sid)
                        skipped += sk
                        for metric in METRICS:
                            rows.append(MetricRow(mode, fold, fusion, g, f, e, metric, vals[metric],
                                                  UNITS[metric]))
                        if vals["end_pose"] < floors[mode]["end_pose"]:
                            violations.append(
                                f"seed {seed} fold {fold} {mode} {fusion} gaze={g} frames={f} e={e}: "
                                f"end-pose {vals['end_pose']:.5f} below floor {floors[mode]['end_pose']:.5f}")
    secs = time.perf_counter() - t0
    log.info("seed %d fold %d done in %.1fs", seed, fold, secs)
    return UnitResult(seed, fold, rows, failures, violations, skipped, secs)


def _run_unit_args(args):
    return run_unit(*args)


def default_jobs() -> int:
    try:
        return max(1, int(os.environ.get("GZM_JOBS", "1")))
    except ValueError:
        return 1


def run_grid(samples: Sequence[TrajectorySample], grid: ExperimentGrid,
             vq_config: VqVaeConfig | None = None, gen_config: GeneratorConfig | None = None,
             jobs: int = 1, vqvae_models: dict[tuple[int, int], MotionVqVae] | None = None
             ) -> list[MetricReport]:
    """One report per seed.  ``vqvae_models`` maps (seed, fold) to pre-trained models to reuse."""
    vq_config = vq_config or VqVaeConfig()
    gen_config = gen_config or GeneratorConfig()
    grid.validate(vq_config.downsample)
    vqvae_models = vqvae_models or {}
    units = [(samples, grid, s, k, vq_config, gen_config, vqvae_models.get((s, k)))
             for s in grid.seeds for k in grid.folds]
    if jobs > 1 and len(units) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_unit_args, units))
    else:
        results = [_run_unit_args(u) for u in units]
    reports = []
    for seed in grid.seeds:
        rep = MetricReport(seed, meta={
            "palm": PALM_DEFINITION, "aggregation": "unweighted mean over folds",
            "grid": asdict(grid), "vqvae": asdict(vq_config), "generator": asdict(gen_config)})
        for r in results:
            if r.seed == seed:
                rep.rows += r.rows
                rep.failures += r.failures
                rep.violations += r.violations
                rep.skipped_angles += r.skipped_angles
        rep.sort()
        reports.append(rep)
    return reports


def fold_mean(report: MetricReport) -> list[MetricRow]:
    """Unweighted mean over folds for every (config, metric); NaN-valued error rows are dropped."""
    groups: dict[tuple, list[MetricRow]] = {}
    for r in report.rows:
        if r.metric == "error":
            continue
        groups.setdefault((r.validation, r.fusion, r.gaze, r.input_frames, r.noise_e, r.metric), []).append(r)
    out = []
    for (v, fu, g, f, e, m), rs in groups.items():
        out.append(MetricRow(v, "mean", fu, g, f, e, m, float(np.mean([r.value for r in rs])), rs[0].units))
    out.sort(key=MetricRow.key)
    return out
