import math

import numpy as np
import pytest

from gazemotion import autodiff as ad
from gazemotion.autodiff import Tape, Tensor, TrainingError
from gazemotion.generator import (FUSIONS, AlignmentError, GeneratorConfig, MotionGenerator,
                                  TokenizedSample, batch_loss, generate, object_code, pool_gaze,
                                  prepare_inputs, rollout_batch, train_generator)
from gazemotion.synth import ObjectSpec, build_dataset
from gazemotion.vqvae import ConfigurationError, MotionVqVae, VqVaeConfig

TINY = dict(model_dim=8, heads=2, gaze_dim=3, layers=2, ffn_mult=2, max_tokens=20)


def tiny_model(K=6, Dc=4, seed=0, **kw):
    cfg = GeneratorConfig(**{**TINY, **kw})
    return MotionGenerator(np.random.default_rng(seed + 100).normal(size=(K, Dc)), cfg,
                           np.random.default_rng(seed))


def random_inputs(rng, model, B=2, L=6):
    idx = rng.integers(0, model.K, size=(B, L))
    gaze = rng.normal(size=(B, L, 3)) if model.config.gaze else None
    return idx, gaze, rng.normal(size=(B, 36))


@pytest.fixture(scope="module")
def samples():
    return build_dataset(n_subjects=2, grasps_per_object=1)


@pytest.fixture(scope="module")
def vq(samples):
    m = MotionVqVae(VqVaeConfig(codebook_size=8, code_dim=4, hidden_channels=16))
    m.fit_normalization([s.frames for s in samples])
    return m


# ------------------------------------------------------------------- gaze


def test_pool_gaze_examples():
    const = np.tile([0.1, 0.2, 0.3], (48, 1))
    pooled = pool_gaze(const, 4)
    assert pooled.shape == (12, 3)
    assert np.allclose(pooled, pooled[0])
    with pytest.raises(AlignmentError):
        pool_gaze(np.zeros((10, 3)), 4)
    with pytest.raises(AlignmentError):
        pool_gaze(np.zeros((48, 3)), 4, n_tokens=11)


def test_zero_gaze_embeds_to_zero():
    m = tiny_model()
    assert not m.embed_gaze(Tensor(np.zeros((5, 3)))).data.any()


def test_constant_gaze_gives_identical_embeddings():
    m = tiny_model()
    g = m.embed_gaze(Tensor(np.tile([0.3, -0.2, 0.1], (5, 1)))).data
    assert np.array_equal(g, np.tile(g[0], (5, 1)))


# ------------------------------------------------------------------ fusion


def test_unknown_fusion_rejected():
    with pytest.raises(ConfigurationError):
        tiny_model(fusion="attention")


def test_summation_with_zero_gaze_equals_bare_token_embedding():
    m = tiny_model(fusion="summation")
    idx = np.array([[0, 3, 5, 1]])
    F = m.fuse(idx, np.zeros((1, 4, 3))).data
    bare = ad.linear(Tensor(m.codebook[idx]), m.p("tok.w"), m.p("tok.b")).data
    assert np.array_equal(F, bare)
    no_gaze = tiny_model(fusion="summation", gaze=False)
    no_gaze.load_state_dict({k: v for k, v in m.state_dict().items() if k in no_gaze.params or
                             k.startswith("buffer.")})
    assert np.array_equal(no_gaze.fuse(idx, None).data, bare)


def test_linear_fusion_zero_weights_gives_relu_bias():
    m = tiny_model(fusion="linear")
    m.p("fuse.w").data[:] = 0.0
    b = np.linspace(-1, 1, 8)
    m.p("fuse.b").data[:] = b
    F = m.fuse(np.array([[1, 2, 3]]), np.ones((1, 3, 3))).data
    assert np.array_equal(F, np.broadcast_to(np.maximum(b, 0.0), F.shape))


def test_conv_fusion_is_a_row_wise_linear_map():
    m = tiny_model(fusion="convolution")
    rng = np.random.default_rng(4)
    idx, gaze, _ = random_inputs(rng, m, B=3, L=5)
    F = m.fuse(idx, gaze).data
    g = gaze @ m.p("gaze.w").data + m.p("gaze.b").data
    W = m.p("fuse.w").data[:, :, 0]  # D_x x C
    b = m.p("fuse.b").data
    for bi in range(3):
        for t in range(5):
            row = np.concatenate([m.codebook[idx[bi, t]], g[bi, t]])
            want = np.maximum(W @ row + b, 0.0)
            assert np.allclose(F[bi, t], want, rtol=0, atol=1e-12)


def test_gaze_required_when_enabled():
    m = tiny_model()
    with pytest.raises(AlignmentError):
        m.fuse(np.array([[1, 2]]), None)


# ------------------------------------------------------------- conditioning


def test_object_token_is_prepended():
    m = tiny_model()
    rng = np.random.default_rng(0)
    idx, gaze, obj = random_inputs(rng, m, B=1, L=12)
    _, layers = m.forward(idx, gaze, obj, return_layers=True)
    assert layers[0].shape == (1, 13, 8)
    obj2 = obj.copy()
    obj2[0, :3] += 0.5
    _, layers2 = m.forward(idx, gaze, obj2, return_layers=True)
    diff = np.any(layers[0].data != layers2[0].data, axis=-1)[0]
    assert diff[0] and not diff[1:].any()


def test_empty_object_set_gives_zero_token():
    code, empty = object_code([])
    assert empty and not code.any()
    m = tiny_model()
    _, layers = m.forward(np.array([1, 2]), np.zeros((2, 3)), m.normalize_objects([]), return_layers=True)
    assert np.array_equal(layers[0].data[0, 0], m.p("pos").data[0])


def test_too_many_objects_rejected():
    objs = [ObjectSpec("pen", np.zeros((2, 3)))] * 4
    with pytest.raises(ConfigurationError):
        object_code(objs)


def test_object_code_layout():
    objs = [ObjectSpec("pen", [[1, 2, 3], [4, 5, 6]]), ObjectSpec("bottle", [[7, 8, 9], [1, 1, 1]])]
    code, empty = object_code(objs)
    assert not empty
    assert code[:6].tolist() == [1, 2, 3, 4, 5, 6] and not code[6:12].any()
    assert code[12:18].tolist() == [7, 8, 9, 1, 1, 1] and not code[24:].any()


# ---------------------------------------------------------------- attention


def test_attention_on_single_position_returns_value_row():
    m = tiny_model()
    x = Tensor(np.random.default_rng(0).normal(size=(1, 1, 8)))
    out = m.attention(x, 0).data
    v = x.data @ m.p("block0.wv").data
    want = v @ m.p("block0.wo").data + m.p("block0.bo").data
    assert np.allclose(out, want, rtol=0, atol=1e-14)


def test_attention_two_by_two_hand_calculation():
    m = tiny_model(model_dim=2, heads=1, layers=1)
    for w in ("wq", "wk", "wv", "wo"):
        m.p(f"block0.{w}").data = np.eye(2)
    m.p("block0.bo").data[:] = 0.0
    out = m.attention(Tensor(np.eye(2)[None]), 0).data[0]
    a = 1.0 / math.sqrt(2.0)
    w0, w1 = 1.0 / (1.0 + math.exp(a)), math.exp(a) / (1.0 + math.exp(a))
    assert np.allclose(out, [[1.0, 0.0], [w0, w1]], rtol=0, atol=1e-15)


@pytest.mark.parametrize("fusion", FUSIONS)
@pytest.mark.parametrize("gaze", [True, False])
def test_causality_bitwise(fusion, gaze):
    m = tiny_model(fusion=fusion, gaze=gaze)
    rng = np.random.default_rng(hash((fusion, gaze)) % 2**32)
    for _ in range(50):
        L = int(rng.integers(1, 12))
        idx, g, obj = random_inputs(rng, m, B=1, L=L)
        t = int(rng.integers(0, L))
        idx2 = idx.copy()
        idx2[:, t:] = rng.integers(0, m.K, size=(1, L - t))
        g2 = None
        if g is not None:
            g2 = g.copy()
            g2[:, t:] = rng.normal(size=(1, L - t, 3))
        a, la = m.forward(idx, g, obj, return_layers=True)
        b, lb = m.forward(idx2, g2, obj, return_layers=True)
        # output row r depends on the object token and tokens < r
        for x, y in zip(la + [a], lb + [b]):
            assert np.array_equal(x.data[:, : t + 1], y.data[:, : t + 1])


# --------------------------------------------------------------- prediction


def test_single_code_always_predicts_zero():
    m = tiny_model(K=1)
    rng = np.random.default_rng(0)
    for L in range(1, 5):
        _, gz, obj = random_inputs(rng, m, B=1, L=L)
        _, s = m.predict_next_index(np.zeros(L, dtype=int), gz[0], obj[0])
        assert s == 0


def test_argmax_matches_softmax_scan_and_shift_invariance():
    rng = np.random.default_rng(1)
    m = tiny_model()
    for _ in range(200):
        logits = rng.normal(size=m.K) * 3
        p = np.exp(logits - logits.max())
        p /= p.sum()
        best = 0
        for i in range(1, len(p)):
            if p[i] > p[best]:
                best = i
        assert int(np.argmax(logits)) == best
        assert int(np.argmax(logits + rng.normal() * 10)) == best
    idx, gz, obj = random_inputs(rng, m, B=1, L=4)
    logits, s = m.predict_next_index(idx[0], gz[0], obj[0])
    assert s == int(np.argmax(logits)) and logits.shape == (m.K,)


def test_rollout_equals_successive_single_steps():
    m = tiny_model()
    rng = np.random.default_rng(2)
    idx, gz, obj = random_inputs(rng, m, B=1, L=3)
    out = m.rollout(idx[0], gz[0], obj[0], 6)
    seq, g = list(idx[0]), gz[0]
    for _ in range(6):
        _, nxt = m.predict_next_index(seq, g, obj[0])
        seq.append(nxt)
        g = np.concatenate([g, g[-1:]])
    assert out.tolist() == seq


def test_batched_rollout_matches_single_rollouts():
    m = tiny_model()
    rng = np.random.default_rng(3)
    idx, gz, obj = random_inputs(rng, m, B=4, L=2)
    horizons = [1, 5, 3, 10]
    batch = rollout_batch(m, idx, gz, obj, horizons)
    for b in range(4):
        assert batch[b].tolist() == m.rollout(idx[b], gz[b], obj[b], horizons[b]).tolist()


def test_one_step_rollout_equals_teacher_forced_prediction():
    m = tiny_model()
    rng = np.random.default_rng(5)
    idx, gz, obj = random_inputs(rng, m, B=1, L=9)
    full = m.forward(idx, gz, obj).data[0]
    for t in range(1, 9):
        one = m.rollout(idx[0, :t], gz[0, :t], obj[0], 1)
        assert one[-1] == int(np.argmax(full[t]))


def test_generate_lengths(samples, vq):
    m = MotionGenerator(vq.codebook, GeneratorConfig(**TINY))
    m.fit_world_normalization(samples)
    s = samples[0]
    p = generate(vq, m, s.frames[:8], s.gaze[:8], s.objects, 1)
    assert len(p.indices) == 3 and p.n_input_tokens == 2 and len(p.frames) == 12
    p = generate(vq, m, s.frames[:8], s.gaze[:8], s.objects, 10)
    assert len(p.indices) == 12 and len(p.frames) == 48
    with pytest.raises(ValueError):
        generate(vq, m, s.frames[:8], s.gaze[:8], s.objects, 0)


def test_prepare_inputs_alignment(samples, vq):
    m = MotionGenerator(vq.codebook, GeneratorConfig(**TINY))
    s = samples[0]
    tok, g, obj = prepare_inputs(vq, m, s.frames[:10], s.gaze[:10], s.objects)
    assert len(tok) == len(g) == 3 and obj.shape == (36,)
    with pytest.raises(AlignmentError):
        prepare_inputs(vq, m, s.frames[:12], s.gaze[:8], s.objects)


# ---------------------------------------------------------------- training


def ce_oracle(logits_row, target):
    z = logits_row - logits_row.max()
    return -(z[target] - math.log(np.exp(z).sum()))


def test_last_position_weight_doubles_final_cross_entropy():
    m = tiny_model(w_last=2.0)
    rng = np.random.default_rng(6)
    toks = rng.integers(0, m.K, size=5)
    s = TokenizedSample(toks, rng.normal(size=(5, 3)), rng.normal(size=36))
    loss, _, _ = batch_loss(m, [s])
    logits = m.forward(toks[None, :4], s.gaze[None, :4], s.objects[None]).data[0]
    per_pos = [ce_oracle(logits[t], toks[t]) for t in range(5)]
    assert float(loss.data) == pytest.approx(sum(per_pos) + per_pos[-1], rel=1e-12)


def test_padding_does_not_change_the_loss():
    m = tiny_model()
    rng = np.random.default_rng(7)
    a = TokenizedSample(rng.integers(0, m.K, size=3), rng.normal(size=(3, 3)), rng.normal(size=36))
    b = TokenizedSample(rng.integers(0, m.K, size=7), rng.normal(size=(7, 3)), rng.normal(size=36))
    la = float(batch_loss(m, [a])[0].data)
    lb = float(batch_loss(m, [b])[0].data)
    assert float(batch_loss(m, [a, b])[0].data) == pytest.approx((la + lb) / 2, rel=1e-12)


def test_gaze_weight_gradient_flow():
    rng = np.random.default_rng(8)
    toks = rng.integers(0, 6, size=6)
    for gaze, expect_flow in ((rng.normal(size=(6, 3)), True), (np.zeros((6, 3)), False)):
        m = tiny_model(fusion="summation")
        s = TokenizedSample(toks, gaze, rng.normal(size=36))
        with Tape() as tape:
            loss, _, _ = batch_loss(m, [s])
        tape.backward(loss)
        g = m.p("gaze.w").grad
        assert (g is not None and np.abs(g).sum() > 0) == expect_flow


def test_memorizes_one_sequence(samples, vq):
    cfg = GeneratorConfig(**{**TINY, "model_dim": 16}, epochs=150, lr=1e-2)
    gen, hist = train_generator(vq, samples[:1], cfg)
    assert hist.accuracy[-1] == 1.0


def test_training_is_deterministic(samples, vq):
    cfg = GeneratorConfig(**TINY, epochs=3, batch_size=4)
    _, h1 = train_generator(vq, samples, cfg)
    _, h2 = train_generator(vq, samples, cfg)
    assert h1.loss == h2.loss and h1.accuracy == h2.accuracy


def test_divergence_is_a_training_error(samples, vq):
    cfg = GeneratorConfig(**TINY, epochs=5, lr=1e200)
    with pytest.raises(TrainingError, match="epoch"), np.errstate(over="ignore", invalid="ignore"):
        train_generator(vq, samples, cfg)


def test_config_validation():
    for bad in (dict(model_dim=10, heads=4), dict(w_last=0.0), dict(layers=0)):
        with pytest.raises(ConfigurationError):
            GeneratorConfig(**bad).validate()


@pytest.mark.parametrize("fusion", FUSIONS)
def test_generator_gradients_match_finite_differences(fusion):
    m = tiny_model(K=4, Dc=3, fusion=fusion, model_dim=4, heads=2, gaze_dim=2, layers=1, ffn_mult=2)
    rng = np.random.default_rng(9)
    batch = [TokenizedSample(rng.integers(0, 4, size=n), rng.normal(size=(n, 3)), rng.normal(size=36))
             for n in (4, 2)]
    err = ad.grad_check(lambda: batch_loss(m, batch)[0], list(m.params.values()))
    assert err < 1e-5
