"""Acceptance criteria 1-10, each printing one PASS/FAIL line.

Criteria 6-8 train at full desk scale (five fold VQ-VAEs plus the seed x fold
generator grid) and take most of an hour on one core.
"""

import hashlib
import json
import math
import time
from collections import Counter

import numpy as np
import pytest

from gazemotion import autodiff as ad
from gazemotion.autodiff import Tensor
from gazemotion.cli import main
from gazemotion.dataset import N_FOLDS, VALIDATIONS, check_split, split
from gazemotion.generator import FUSIONS, GeneratorConfig, MotionGenerator, TokenizedSample, batch_loss
from gazemotion.harness import ExperimentGrid, default_jobs, fold_mean, run_grid
from gazemotion.metrics import avg_position_error, end_pose_error, key_pose_angle_error, trajectory_metrics
from gazemotion.synth import HELD_OUT_MOTIONS, add_joint_noise, build_dataset
from gazemotion.vqvae import MotionVqVae, VqVaeConfig, nearest_codes, quantize, train_vqvae

SEEDS = [0, 1, 2, 3, 4]
GRAD_TOL = 1e-5


@pytest.fixture
def announce(capsys):
    def say(n: int, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} ({detail})")
    return say


@pytest.fixture(scope="module")
def corpus():
    return build_dataset()


@pytest.fixture(scope="module")
def fold_models(corpus):
    """One default-config VQ-VAE per fold, trained on that fold's shared training set."""
    models, seconds = {}, {}
    for k in range(N_FOLDS):
        train, _ = split(corpus, k, "CS")
        models[k], hist = train_vqvae([s.frames for s in train], VqVaeConfig())
        seconds[k] = hist.seconds
    return models, seconds


@pytest.fixture(scope="module")
def grid_reports(corpus, fold_models):
    models, _ = fold_models
    grid = ExperimentGrid(seeds=SEEDS)
    shared = {(s, k): models[k] for s in SEEDS for k in range(N_FOLDS)}
    t0 = time.perf_counter()
    reports = run_grid(corpus, grid, VqVaeConfig(), GeneratorConfig(), jobs=default_jobs(), vqvae_models=shared)
    return reports, time.perf_counter() - t0


# ------------------------------------------------------------------------- 1


def _grad_cases():
    rng = np.random.default_rng(0)

    def t(*shape):
        return Tensor(rng.normal(size=shape))

    cases = {}
    x, W, b = t(5, 4), t(4, 3), t(3)
    cases["linear"] = (lambda: ad.sum_all(ad.mul(ad.linear(x, W, b), Tensor(np.linspace(-1, 1, 15).reshape(5, 3)))),
                       [x, W, b])
    xc, K, bc = t(2, 3, 9), t(4, 3, 3), t(4)
    Rc = Tensor(rng.normal(size=(2, 4, 5)))
    cases["conv1d"] = (lambda: ad.sum_all(ad.mul(ad.conv1d(xc, K, bc, stride=2, padding=1), Rc)), [xc, K, bc])

    gen = MotionGenerator(rng.normal(size=(5, 3)), GeneratorConfig(model_dim=8, heads=2, gaze_dim=3, layers=1,
                                                                     ffn_mult=2), np.random.default_rng(1))
    xa = t(2, 4, 8)
    Ra = Tensor(rng.normal(size=(2, 4, 8)))
    block = [gen.p(n) for n in gen.params if n.startswith("block0.")]
    cases["attention block"] = (lambda: ad.sum_all(ad.mul(gen.block(xa, 0), Ra)), [xa] + block)

    for fusion in FUSIONS:
        g = MotionGenerator(rng.normal(size=(5, 3)), GeneratorConfig(model_dim=4, heads=2, gaze_dim=3,
                                                                       fusion=fusion), np.random.default_rng(2))
        for name in ("fuse.b", "gaze.b"):
            if name in g.params:
                g.p(name).data[:] = rng.normal(size=g.p(name).shape)
        idx, gz = rng.integers(0, 5, size=(2, 3)), rng.normal(size=(2, 3, 3))
        Rf = Tensor(rng.normal(size=(2, 3, 4)))
        ps = [g.p(n) for n in g.params if n.split(".")[0] in ("gaze", "fuse", "tok", "gexp")]
        cases[f"fusion {fusion}"] = (lambda g=g, idx=idx, gz=gz, Rf=Rf: ad.sum_all(ad.mul(g.fuse(idx, gz), Rf)), ps)

    # keep every residual at least 0.05 away from the smooth-L1 kink at beta=1
    h = Tensor(rng.normal(size=(4, 6)))
    off = rng.choice([-1, 1], size=(4, 6)) * rng.choice([0.3, 0.7, 1.5, 2.5], size=(4, 6))
    hh = Tensor(h.data + off)
    cases["smooth-L1"] = (lambda: ad.smooth_l1(h, hh, 1.0), [h, hh])

    z = t(6, 5)
    y, w = rng.integers(0, 5, size=6), np.array([1, 1, 1, 2, 0, 0], dtype=float)
    cases["weighted CE"] = (lambda: ad.cross_entropy(z, y, w), [z])

    full = MotionGenerator(rng.normal(size=(4, 3)), GeneratorConfig(model_dim=4, heads=2, gaze_dim=2, layers=1,
                                                                      ffn_mult=2), np.random.default_rng(3))
    batch = [TokenizedSample(rng.integers(0, 4, size=n), rng.normal(size=(n, 3)), rng.normal(size=36))
             for n in (4, 2)]
    cases["generator loss end to end"] = (lambda: batch_loss(full, batch)[0], list(full.params.values()))
    return cases


def _straight_through_error():
    """Gradient reaching the encoder output equals the decoder's finite-difference gradient at the code."""
    m = MotionVqVae(VqVaeConfig(codebook_size=8, code_dim=4, hidden_channels=16))
    rng = np.random.default_rng(4)
    x = Tensor(rng.normal(size=(1, 126, 16)))
    E = Tensor(rng.normal(size=(1, 4, 4)), requires_grad=True)
    Qd = m.codebook[nearest_codes(E.data.transpose(0, 2, 1), m.codebook)].transpose(0, 2, 1)
    with ad.Tape() as tape:
        loss = ad.smooth_l1(x, m.decoder_graph(ad.add(E, ad.stop_gradient(ad.sub(Tensor(Qd), E)))), 1.0)
    tape.backward(loss)
    probe = Qd.copy()
    num = ad.numerical_grad(lambda: float(ad.smooth_l1(x, m.decoder_graph(Tensor(probe)), 1.0).data), probe)
    return float(np.linalg.norm(E.grad - num) / np.linalg.norm(num))


def test_criterion_1_gradient_suite(announce):
    t0 = time.perf_counter()
    errors = {name: ad.grad_check(build, ps, eps=1e-5) for name, (build, ps) in _grad_cases().items()}
    errors["straight-through VQ"] = _straight_through_error()
    secs = time.perf_counter() - t0
    worst = max(errors, key=errors.get)
    ok = all(e < GRAD_TOL for e in errors.values()) and secs < 60
    announce(1, ok, f"{len(errors)} checks, worst {worst} rel err {errors[worst]:.2e}, {secs:.1f}s")
    assert ok, errors


# ------------------------------------------------------------------------- 2


def test_criterion_2_quantization_oracle(announce):
    rng = np.random.default_rng(2)
    total = mismatches = ties = 0
    while total < 1000:
        K, D = int(rng.integers(1, 33)), int(rng.integers(1, 7))
        C = rng.integers(-2, 3, size=(K, D)).astype(float)
        E = (rng.integers(-2, 3, size=(50, D)) + rng.choice([0.0, 0.5], size=(50, D)))[: 1000 - total]
        got = quantize(E, C).indices
        for e, i in zip(E, got):
            d = [sum((float(a) - float(c)) ** 2 for a, c in zip(e, row)) for row in C]
            best = min(range(K), key=lambda j: (d[j], j))
            ties += sum(v == d[best] for v in d) > 1
            mismatches += int(i) != best
        total += len(E)
    ok = mismatches == 0
    announce(2, ok, f"{total} vectors, {ties} with tied nearest codes, {mismatches} mismatches")
    assert ok


# ------------------------------------------------------------------------- 3


def test_criterion_3_causality(announce):
    rng = np.random.default_rng(3)
    gens = [MotionGenerator(rng.normal(size=(64, 32)), GeneratorConfig(fusion=f, gaze=g), np.random.default_rng(i))
            for i, (f, g) in enumerate([(f, g) for f in FUSIONS for g in (True, False)])]
    broken = 0
    for trial in range(1000):
        gen = gens[trial % len(gens)]
        L = int(rng.integers(2, 16))
        idx = rng.integers(0, 64, size=(1, L))
        gaze = rng.normal(size=(1, L, 3)) if gen.config.gaze else None
        obj = rng.normal(size=(1, 36))
        t = int(rng.integers(0, L - 1))
        idx2 = idx.copy()
        idx2[:, t + 1:] = rng.integers(0, 64, size=(1, L - t - 1))
        gaze2 = None
        if gaze is not None:
            gaze2 = gaze.copy()
            gaze2[:, t + 1:] = rng.normal(size=(1, L - t - 1, 3))
        # logits row r + 1 is the prediction made after seeing tokens 0..r
        a = gen.forward(idx, gaze, obj).data[:, : t + 2]
        b = gen.forward(idx2, gaze2, obj).data[:, : t + 2]
        broken += not np.array_equal(a, b)
    ok = broken == 0
    announce(3, ok, f"1000 perturbation trials over {len(gens)} model variants, {broken} changed earlier logits")
    assert ok


# ------------------------------------------------------------------------- 4


def test_criterion_4_metric_oracles(announce):
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(100):
        T = int(rng.integers(1, 40))
        P, Q = rng.normal(size=(T, 3)), rng.normal(size=(T, 3))
        dist = [math.sqrt(sum((float(p[i]) - float(q[i])) ** 2 for i in range(3))) for p, q in zip(P, Q)]
        s = rng.normal(size=3)
        u, v = P[-1] - s, Q[-1] - s
        dot = sum(float(u[i]) * float(v[i]) for i in range(3))
        nu, nv = math.sqrt(sum(float(c) ** 2 for c in u)), math.sqrt(sum(float(c) ** 2 for c in v))
        angle = math.acos(max(-1.0, min(1.0, dot / (nu * nv))))
        worst = max(worst, abs(avg_position_error(P, Q) - sum(dist) / T),
                    abs(end_pose_error(P, Q) - dist[-1]), abs(key_pose_angle_error(s, P[-1], Q[-1]) - angle))
    P = rng.integers(-5, 6, size=(10, 3)).astype(float)
    hand_cases = [
        avg_position_error(P, P) == 0.0 and end_pose_error(P, P) == 0.0,
        avg_position_error(P, P + [3.0, 4.0, 0.0]) == 5.0 and end_pose_error(P, P + [0.0, 3.0, 4.0]) == 5.0,
        key_pose_angle_error([0, 0, 0], [1, 0, 0], [0, 0, 2]) == math.pi / 2,
        key_pose_angle_error([1, 2, 3], [2, 2, 3], [1, 5, 3]) == math.pi / 2,
    ]
    ok = worst <= 1e-12 and all(hand_cases)
    announce(4, ok, f"100 random pairs, max deviation {worst:.1e}; hand cases {sum(hand_cases)}/{len(hand_cases)} exact")
    assert ok


# ------------------------------------------------------------------------- 5


def test_criterion_5_noise_calibration(announce):
    rng = np.random.default_rng(5)
    rel = {}
    for e in (0.1, 0.2, 0.3):
        frames = np.zeros((100000 // 42 + 1, 126))
        disp = add_joint_noise(frames, e, rng).reshape(-1, 3)[:100000]
        rel[e] = abs(np.linalg.norm(disp, axis=1).mean() - e) / e
    ok = all(r < 0.02 for r in rel.values())
    announce(5, ok, ", ".join(f"e={e}: {100 * r:.2f}% off" for e, r in rel.items()))
    assert ok


# ------------------------------------------------------------------------- 6


def test_criterion_6_vqvae_desk_training(announce, corpus, fold_models):
    models, seconds = fold_models
    vq = models[0]
    train, _ = split(corpus, 0, "CS")
    train_ids = {id(s) for s in train}
    held_out = [s for s in corpus if id(s) not in train_ids]
    mean_pose = np.concatenate([s.frames for s in train]).mean(axis=0)
    rec = np.mean([trajectory_metrics(s.frames, vq.reconstruct(s.frames), 0)["avg_position"] for s in held_out])
    base = np.mean([trajectory_metrics(s.frames, np.tile(mean_pose, (len(s.frames), 1)), 0)["avg_position"]
                    for s in held_out])
    ok = rec < 0.05 and rec < base and seconds[0] <= 15 * 60
    announce(6, ok, f"{len(held_out)} held-out samples: reconstruction {rec:.4f} m vs mean-pose {base:.4f} m, "
                    f"trained in {seconds[0]:.0f}s")
    assert ok


# ------------------------------------------------------------------------- 7


def _seed_means(reports):
    """Per seed: fold-mean end-pose keyed by (validation, gaze, input_frames)."""
    out = {}
    for rep in reports:
        out[rep.seed] = {(r.validation, r.gaze, r.input_frames): r.value
                         for r in fold_mean(rep) if r.metric == "end_pose"}
    return out


def test_criterion_7_trend_reproduction(announce, grid_reports):
    reports, secs = grid_reports
    means = _seed_means(reports)
    trend = {}
    for v in VALIDATIONS:
        for g in (True, False):
            at44 = np.mean([means[s][(v, g, 44)] for s in SEEDS])
            at8 = np.mean([means[s][(v, g, 8)] for s in SEEDS])
            trend[(v, g)] = (at8, at44)
    gaze_wins = 0
    for s in SEEDS:
        on = np.mean([means[s][(v, True, 8)] for v in VALIDATIONS])
        off = np.mean([means[s][(v, False, 8)] for v in VALIDATIONS])
        gaze_wins += on <= off
    trend_ok = all(at44 < at8 for at8, at44 in trend.values())
    ok = trend_ok and gaze_wins >= 4
    detail = "; ".join(f"{v}{'' if g else ' no-gaze'} 8f {a:.3f} -> 44f {b:.3f}" for (v, g), (a, b) in trend.items())
    announce(7, ok, f"{detail}; gaze <= no-gaze at 8 frames in {gaze_wins}/5 seeds; grid {secs / 60:.1f} min")
    assert ok


# ------------------------------------------------------------------------- 8


def test_criterion_8_floor_dominance(announce, grid_reports):
    reports, _ = grid_reports
    cells = 0
    margin = math.inf
    below = Counter()
    for rep in reports:
        floors = {(r.validation, r.fold): r.value for r in rep.rows if r.metric == "vqvae_floor"}
        for r in rep.rows:
            if r.metric == "end_pose":
                cells += 1
                gap = r.value - floors[(r.validation, r.fold)]
                margin = min(margin, gap)
                if gap < 0:
                    below[(r.input_frames, r.validation, "gaze" if r.gaze else "no-gaze")] += 1
    violations = sum(len(rep.violations) for rep in reports)
    n_below = sum(below.values())
    ok = n_below == 0 and violations == 0 and cells > 0
    where = ", ".join(f"{f}f {v} {g} x{n}" for (f, v, g), n in sorted(below.items()))
    announce(8, ok, f"{cells} cells, {n_below} below the VQ-VAE floor, smallest gap {margin:+.4f} m"
                    + (f"; below-floor cells: {where}" if where else ""))
    assert ok, [v for rep in reports for v in rep.violations]


# ------------------------------------------------------------------------- 9


def test_criterion_9_split_soundness(announce, corpus):
    problems = []
    for k in range(N_FOLDS):
        for mode in VALIDATIONS:
            train, test = split(corpus, k, mode)
            problems += [f"fold {k} {mode}: {p}" for p in check_split(train, test, mode)]
            assert not {s.motion for s in train} & set(HELD_OUT_MOTIONS)
    # the checker must notice an injected leak
    train, test = split(corpus, 0, "CSM")
    caught = bool(check_split(train + test[:1], test, "CSM"))
    ok = not problems and caught
    announce(9, ok, f"{N_FOLDS * len(VALIDATIONS)} splits sound, injected leak detected: {caught}")
    assert ok, problems


# ------------------------------------------------------------------------ 10


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_criterion_10_reproducibility(announce, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({
        "synth": {"n_subjects": 5, "grasps_per_object": 1},
        "vqvae": {"codebook_size": 16, "code_dim": 8, "hidden_channels": 32, "epochs": 5},
        "generator": {"model_dim": 16, "heads": 2, "layers": 1, "epochs": 5},
        "grid": {"input_frames": [8, 24], "folds": [0, 1]},
    }))
    hashes = []
    for run in ("a", "b"):
        d = tmp_path / run
        d.mkdir()
        c = ["--config", str(cfg)]
        assert main(["synth", *c, "--out", str(d / "data.jsonl")]) == 0
        assert main(["train-vqvae", *c, "--data", str(d / "data.jsonl"), "--fold", "0", "--out", str(d / "vq.gzm")]) == 0
        assert main(["train-generator", *c, "--data", str(d / "data.jsonl"), "--fold", "0",
                     "--vqvae", str(d / "vq.gzm"), "--out", str(d / "gen.gzm")]) == 0
        assert main(["evaluate", *c, "--data", str(d / "data.jsonl"), "--train-inline", "--out",
                     str(d / "report.csv")]) in (0, 5)
        hashes.append({f: _sha(d / f) for f in ("data.jsonl", "vq.gzm", "gen.gzm", "report.csv", "report.mean.csv")})
    same = [f for f in hashes[0] if hashes[0][f] == hashes[1][f]]
    ok = len(same) == len(hashes[0])
    announce(10, ok, f"{len(same)}/{len(hashes[0])} artifacts bitwise identical across reruns")
    assert ok
