"""``gazemotion`` command line: synth, train, predict, evaluate, ablate, noise-sweep, plot."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from collections import Counter
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checkpoint
from .autodiff import NumericalError, TrainingError
from .config import ConfigError, RunConfig, dump_config, from_dict, load_config
from .dataset import DatasetParseError, read_dataset, record_to_sample, sample_to_record, split, write_dataset
from .generator import FUSIONS, AlignmentError, generate, train_generator
from .harness import (NOISE_INPUT_FRAMES, NOISE_LEVELS, ExperimentGrid, MetricReport, default_jobs,
                      fold_mean, run_grid)
from .report import plot_prediction, plot_report, read_report, squared, write_report
from .synth import HELD_OUT_MOTIONS, build_dataset
from .vqvae import ConfigurationError, train_vqvae

log = logging.getLogger("gazemotion")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_TRAINING, EXIT_INVARIANT = 0, 2, 3, 4, 5
PARTIAL_STEP_SECONDS = 0.3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# ------------------------------------------------------------------- helpers


def _guard_output(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise UsageError(f"{path} exists; pass --force to overwrite")
    path.parent.mkdir(parents=True, exist_ok=True)


def _sidecar(path: Path, suffix: str) -> Path:
    return path.with_name(path.stem + suffix)


def _load_samples(path: str | Path):
    try:
        return read_dataset(path)
    except FileNotFoundError as exc:
        raise DataError(f"dataset not found: {path}") from exc


def _config(args) -> RunConfig:
    cfg = load_config(getattr(args, "config", None))
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _training_set(samples, fold):
    if fold is None:
        return [s for s in samples if s.motion not in HELD_OUT_MOTIONS]
    return split(samples, fold, "CS")[0]


def _log_meta(hist) -> dict:
    """Training summary for checkpoints, without wall-clock fields so reruns stay bitwise identical."""
    return {k: v for k, v in hist.summary().items() if k != "seconds"}


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# ------------------------------------------------------------------ commands


def cmd_synth(args) -> int:
    cfg = _config(args)
    if args.subjects is not None:
        cfg.synth.n_subjects = args.subjects
    out = Path(args.out)
    _guard_output(out, args.force)
    samples = build_dataset(cfg.synth.n_subjects, cfg.synth.grasps_per_object, cfg.seed, cfg.synth.fps)
    n = write_dataset(samples, out)
    dump_config(cfg, _sidecar(out, ".config.json"))
    print(f"wrote {n} samples to {out}")
    for motion, count in sorted(Counter(s.motion for s in samples).items()):
        print(f"  {motion:16s} {count}")
    return EXIT_OK


def cmd_train_vqvae(args) -> int:
    cfg = _config(args)
    if args.epochs is not None:
        cfg.vqvae.epochs = args.epochs
    out = Path(args.out)
    _guard_output(out, args.force)
    samples = _load_samples(args.data)
    train = _training_set(samples, args.fold)
    vq_cfg = replace(cfg.vqvae, seed=cfg.seed)
    model, hist = train_vqvae([s.frames for s in train], vq_cfg, progress=args.verbose)
    checkpoint.save_models(out, vq=model, meta={"seed": cfg.seed, "fold": args.fold,
                                                "log": _log_meta(hist)})
    _write_csv(_sidecar(out, ".loss.csv"), ["epoch", "total", "recon", "embed", "commit", "resets"],
               [[i, repr(t), repr(r), repr(e), repr(c), n] for i, (t, r, e, c, n) in
                enumerate(zip(hist.total, hist.recon, hist.embed, hist.commit, hist.resets))])
    cfg.vqvae = vq_cfg
    dump_config(cfg, _sidecar(out, ".config.json"))
    print(f"vqvae trained on {len(train)} samples: {json.dumps(hist.summary())}")
    return EXIT_OK


def cmd_train_generator(args) -> int:
    cfg = _config(args)
    if args.gaze is not None:
        cfg.generator.gaze = args.gaze == "on"
    if args.fusion is not None:
        cfg.generator.fusion = args.fusion
    if args.epochs is not None:
        cfg.generator.epochs = args.epochs
    if not args.vqvae or not Path(args.vqvae).exists():
        raise DataError(f"train-generator needs a trained VQ-VAE checkpoint (--vqvae); not found: {args.vqvae}")
    out = Path(args.out)
    _guard_output(out, args.force)
    vq = checkpoint.load_vqvae(args.vqvae)
    samples = _load_samples(args.data)
    train = _training_set(samples, args.fold)
    gen_cfg = replace(cfg.generator, seed=cfg.seed)
    gen, hist = train_generator(vq, train, gen_cfg, progress=args.verbose)
    checkpoint.save_models(out, vq=vq, gen=gen, meta={"seed": cfg.seed, "fold": args.fold,
                                                       "log": _log_meta(hist)})
    _write_csv(_sidecar(out, ".loss.csv"), ["epoch", "loss", "accuracy"],
               [[i, repr(a), repr(b)] for i, (a, b) in enumerate(zip(hist.loss, hist.accuracy))])
    cfg.generator = gen_cfg
    dump_config(cfg, _sidecar(out, ".config.json"))
    print(f"generator ({gen_cfg.fusion}, gaze={'on' if gen_cfg.gaze else 'off'}) trained on "
          f"{len(train)} samples: {json.dumps(hist.summary())}")
    return EXIT_OK


def cmd_predict(args) -> int:
    vq = checkpoint.load_vqvae(args.ckpt)
    gen = checkpoint.load_generator(args.ckpt)
    l = vq.l
    if args.frames < l or args.frames % l:
        raise UsageError(f"--frames must be a positive multiple of l={l}, got {args.frames}")
    samples = _load_samples(args.input)
    if not 0 <= args.index < len(samples):
        raise UsageError(f"--index {args.index} out of range for {len(samples)} samples")
    s = samples[args.index]
    T = len(s.frames)
    if T % l or args.frames >= T:
        raise UsageError(f"sample has {T} frames; need a multiple of l={l} longer than --frames")
    out = Path(args.out)
    _guard_output(out, args.force)
    step = max(l, int(round(PARTIAL_STEP_SECONDS * s.fps / l)) * l)
    full = generate(vq, gen, s.frames[: args.frames], s.gaze[: args.frames], s.objects, (T - args.frames) // l)
    frames = np.concatenate([s.frames[: args.frames], full.frames[args.frames: T]])
    rec = sample_to_record(replace(s, frames=frames))
    record_to_sample(rec)  # the prediction must itself be a valid dataset record
    out.write_text(json.dumps(rec, separators=(",", ":")) + "\n", encoding="utf-8")
    with open(_sidecar(out, ".partial.jsonl"), "w", encoding="utf-8") as fh:
        for f in range(args.frames, T, step):
            p = generate(vq, gen, s.frames[:f], s.gaze[:f], s.objects, (T - f) // l)
            fh.write(json.dumps({"input_frames": f, "frames": p.frames[:T].tolist()},
                                separators=(",", ":")) + "\n")
    print(f"predicted {T - args.frames} frames from {args.frames} input frames -> {out}")
    return EXIT_OK


def _grid_from_args(args, cfg: RunConfig, base: ExperimentGrid) -> ExperimentGrid:
    grid = base
    if args.grid:
        try:
            data = json.loads(Path(args.grid).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise UsageError(f"grid file not found: {args.grid}") from exc
        merged = {**{k: getattr(base, k) for k in base.__dataclass_fields__}, **data}
        grid = from_dict(ExperimentGrid, merged, "grid")
    if args.seeds:
        grid.seeds = args.seeds
    if args.folds:
        grid.folds = args.folds
    grid.validate(cfg.vqvae.downsample)
    return grid


def _vqvae_models(args, grid):
    if not args.vqvae_dir:
        if not args.train_inline:
            raise UsageError("pass --train-inline or --vqvae-dir with fold<k>.gzm checkpoints")
        return {}
    models = {}
    for k in grid.folds:
        path = Path(args.vqvae_dir) / f"fold{k}.gzm"
        if not path.exists():
            raise DataError(f"missing VQ-VAE checkpoint {path}")
        vq = checkpoint.load_vqvae(path)
        for s in grid.seeds:
            models[(s, k)] = vq
    return models


def _run(args, preset, square: bool = False) -> tuple[list[MetricReport], Path, RunConfig]:
    """Shared driver; ``preset`` maps the config grid to the command's grid."""
    cfg = _config(args)
    if getattr(args, "epochs", None) is not None:
        cfg.generator.epochs = args.epochs
    grid = _grid_from_args(args, cfg, preset(cfg.grid))
    cfg.grid = grid
    out = Path(args.out)
    _guard_output(out, args.force)
    samples = _load_samples(args.data)
    models = _vqvae_models(args, grid)
    reports = run_grid(samples, grid, cfg.vqvae, cfg.generator, jobs=args.jobs, vqvae_models=models)
    for rep in reports:
        path = out if len(reports) == 1 else out.with_name(f"{out.stem}.seed{rep.seed}{out.suffix}")
        rows = squared(rep.rows) if square else rep.rows
        write_report(rows, path)
        summary = squared(fold_mean(rep)) if square else fold_mean(rep)
        write_report(summary, path.with_name(path.stem + ".mean" + path.suffix))
        meta = {"seed": rep.seed, "failures": rep.failures, "violations": rep.violations,
                "skipped_angles": rep.skipped_angles, **rep.meta}
        path.with_name(path.stem + ".meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    dump_config(cfg, _sidecar(out, ".config.json"))
    return reports, out, cfg


def _status(reports: list[MetricReport]) -> int:
    failures = [f for r in reports for f in r.failures]
    violations = [v for r in reports for v in r.violations]
    for f in failures:
        print(f"cell failed: {f}", file=sys.stderr)
    for v in violations:
        print(f"invariant violated: {v}", file=sys.stderr)
    if violations:
        return EXIT_INVARIANT
    if failures:
        return EXIT_TRAINING
    return EXIT_OK


def cmd_evaluate(args) -> int:
    reports, out, _ = _run(args, lambda g: g)
    print(f"wrote {sum(len(r.rows) for r in reports)} rows to {out}")
    return _status(reports)


def cmd_ablate(args) -> int:
    reports, out, cfg = _run(args, lambda g: replace(g, fusions=list(FUSIONS), gaze=[True]))
    means = [fold_mean(r) for r in reports]
    frames = cfg.grid.input_frames
    table = []
    for v in cfg.grid.validations:
        for fusion in cfg.grid.fusions:
            cells = []
            for f in frames:
                vals = [r.value for m in means for r in m if r.validation == v and r.fusion == fusion
                        and r.input_frames == f and r.metric == "end_pose" and r.noise_e == 0.0]
                cells.append(repr(float(np.mean(vals))) if vals else "nan")
            table.append([v, fusion, *cells])
    table_path = _sidecar(out, ".table.csv")
    _write_csv(table_path, ["validation", "fusion", *frames], table)
    print(f"end-pose table ({len(table)} rows x {len(frames)} frame counts) -> {table_path}")
    return _status(reports)


def cmd_noise_sweep(args) -> int:
    reports, out, _ = _run(args, lambda g: replace(g, input_frames=[NOISE_INPUT_FRAMES],
                                                  noise_levels=list(NOISE_LEVELS)), square=True)
    print(f"noise sweep (squared errors) -> {out}")
    return _status(reports)


def cmd_plot(args) -> int:
    out = Path(args.out)
    _guard_output(out, args.force)
    if args.report:
        rows = read_report(args.report)
        if not rows:
            log.warning("empty report %s; nothing plotted", args.report)
            return EXIT_OK
        x = args.x or ("noise_e" if len({r.noise_e for r in rows}) > 1 else "input_frames")
        if x == "noise_e":
            rows = [r for r in rows if r.noise_e > 0]
        svg = plot_report(rows, args.metric, x)
    elif args.sample and args.pred:
        sample = _load_samples(args.sample)[args.index]
        pred = _load_samples(args.pred)[0]
        partial_path = _sidecar(Path(args.pred), ".partial.jsonl")
        partial = []
        if partial_path.exists():
            partial = [np.asarray(json.loads(line)["frames"]) for line in partial_path.read_text().splitlines()
                       if line.strip()]
        svg = plot_prediction(sample, pred.frames, args.frames, partial)
    else:
        raise UsageError("plot needs --report, or --sample with --pred")
    out.write_text(svg, encoding="utf-8")
    print(f"wrote {out}")
    return EXIT_OK


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gazemotion", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="JSON run config (unknown keys are rejected)")
            sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--force", action="store_true", help="overwrite existing outputs")

    sp = sub.add_parser("synth", help="generate the synthetic dataset")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--subjects", type=int)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train-vqvae", help="train the motion VQ-VAE")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--fold", type=int, help="train on this fold's training split (default: all seen motions)")
    sp.add_argument("--epochs", type=int)
    sp.set_defaults(func=cmd_train_vqvae)

    sp = sub.add_parser("train-generator", help="train the token generator on a frozen VQ-VAE")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--vqvae", help="VQ-VAE checkpoint")
    sp.add_argument("--out", required=True)
    sp.add_argument("--fold", type=int)
    sp.add_argument("--gaze", choices=("on", "off"))
    sp.add_argument("--fusion", choices=("linear", "convolution", "summation"))
    sp.add_argument("--epochs", type=int)
    sp.set_defaults(func=cmd_train_generator)

    sp = sub.add_parser("predict", help="forecast the rest of a sample from its first frames")
    common(sp, config=False)
    sp.add_argument("--ckpt", required=True, help="generator checkpoint (holds the VQ-VAE too)")
    sp.add_argument("--input", required=True)
    sp.add_argument("--index", type=int, default=0)
    sp.add_argument("--frames", type=int, default=8)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_predict)

    for name, func, helptext in (("evaluate", cmd_evaluate, "input-frame sweep over all folds"),
                                 ("ablate", cmd_ablate, "fusion ablation table"),
                                 ("noise-sweep", cmd_noise_sweep, "input-noise robustness sweep")):
        sp = sub.add_parser(name, help=helptext)
        common(sp)
        sp.add_argument("--data", required=True)
        sp.add_argument("--out", required=True, help="report path (.csv or .jsonl)")
        sp.add_argument("--grid", help="JSON grid overrides")
        sp.add_argument("--seeds", type=int, nargs="+")
        sp.add_argument("--folds", type=int, nargs="+")
        sp.add_argument("--epochs", type=int, help="generator epochs")
        sp.add_argument("--train-inline", action="store_true", help="train VQ-VAEs as part of the run")
        sp.add_argument("--vqvae-dir", help="directory of fold<k>.gzm VQ-VAE checkpoints")
        sp.add_argument("--jobs", type=int, default=default_jobs(), help="parallel workers (env GZM_JOBS)")
        sp.set_defaults(func=func)

    sp = sub.add_parser("plot", help="SVG charts from a report, or a top view of a prediction")
    common(sp, config=False)
    sp.add_argument("--report")
    sp.add_argument("--metric", default="end_pose")
    sp.add_argument("--x", choices=("input_frames", "noise_e"))
    sp.add_argument("--sample")
    sp.add_argument("--index", type=int, default=0)
    sp.add_argument("--pred")
    sp.add_argument("--frames", type=int, default=8)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_plot)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, ConfigurationError, AlignmentError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, DatasetParseError, checkpoint.CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, NumericalError) as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_TRAINING


if __name__ == "__main__":
    sys.exit(main())
