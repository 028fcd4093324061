"""Gaze/object-conditioned causal transformer over VQ-VAE hand tokens."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, TrainingError
from .layers import Module, xavier_uniform
from .synth import MAX_OBJECTS, MAX_POINTS, ObjectSpec, TrajectorySample
from .vqvae import ConfigurationError, MotionVqVae

log = logging.getLogger(__name__)

FUSIONS = ("linear", "convolution", "summation")
OBJECT_DIM = MAX_OBJECTS * MAX_POINTS * 3


class AlignmentError(ValueError):
    pass


@dataclass
class GeneratorConfig:
    fusion: str = "linear"
    gaze: bool = True
    gaze_dim: int = 16
    model_dim: int = 64
    layers: int = 2
    heads: int = 4
    ffn_mult: int = 4
    w_last: float = 2.0
    max_tokens: int = 32
    epochs: int = 60
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0

    def validate(self) -> None:
        if self.fusion not in FUSIONS:
            raise ConfigurationError(f"unknown fusion {self.fusion!r}; expected one of {FUSIONS}")
        if self.model_dim % self.heads:
            raise ConfigurationError("model_dim must be divisible by heads")
        if self.layers < 1 or self.gaze_dim < 1 or self.max_tokens < 2:
            raise ConfigurationError("need layers >= 1, gaze_dim >= 1, max_tokens >= 2")
        if self.w_last <= 0 or self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigurationError("w_last > 0, epochs >= 0, batch_size >= 1, lr > 0 required")


@dataclass
class GeneratorHistory:
    loss: list[float] = field(default_factory=list)
    accuracy: list[float] = field(default_factory=list)
    seconds: float = 0.0

    def summary(self) -> dict:
        return {
            "epochs": len(self.loss),
            "final_loss": self.loss[-1] if self.loss else None,
            "final_accuracy": self.accuracy[-1] if self.accuracy else None,
            "seconds": round(self.seconds, 3),
        }


@dataclass
class Prediction:
    indices: np.ndarray  # input tokens followed by the generated ones
    n_input_tokens: int
    frames: np.ndarray  # decoded poses for the whole token sequence


def pool_gaze(gaze: np.ndarray, l: int, n_tokens: int | None = None) -> np.ndarray:
    """Average each window of ``l`` gaze frames: ``l * T_d x 3`` -> ``T_d x 3``."""
    gaze = np.asarray(gaze, dtype=np.float64)
    if len(gaze) % l:
        raise AlignmentError(f"gaze length {len(gaze)} is not a multiple of {l}")
    pooled = gaze.reshape(-1, l, 3).mean(axis=1)
    if n_tokens is not None and len(pooled) != n_tokens:
        raise AlignmentError(f"{len(pooled)} gaze tokens for {n_tokens} hand tokens")
    return pooled


def object_code(objects: Sequence[ObjectSpec]) -> tuple[np.ndarray, bool]:
    """Concatenate up to three 12-d object codes, zero-padded; flag empty sets."""
    if len(objects) > MAX_OBJECTS:
        raise ConfigurationError(f"at most {MAX_OBJECTS} objects supported, got {len(objects)}")
    out = np.zeros(OBJECT_DIM)
    for i, o in enumerate(objects):
        out[i * 12: (i + 1) * 12] = o.code()
    return out, len(objects) == 0


def object_mask(objects: Sequence[ObjectSpec]) -> np.ndarray:
    mask = np.zeros(OBJECT_DIM, dtype=bool)
    for i, o in enumerate(objects):
        mask[i * 12: i * 12 + o.points.size] = True
    return mask


class MotionGenerator(Module):
    def __init__(self, codebook: np.ndarray, config: GeneratorConfig | None = None,
                 rng: np.random.Generator | None = None):
        super().__init__()
        self.config = config = config or GeneratorConfig()
        config.validate()
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        self.codebook = np.asarray(codebook, dtype=np.float64)
        K, Dc = self.codebook.shape
        Dg, Dx = config.gaze_dim, config.model_dim
        self.buffers["world_mean"] = np.zeros(3)
        self.buffers["world_scale"] = np.ones(3)

        if config.gaze:
            self.add_param("gaze.w", xavier_uniform(rng, 3, Dg))
            self.add_param("gaze.b", np.zeros(Dg))
        fin = Dc + (Dg if config.gaze else 0)
        if config.fusion == "linear":
            self.add_param("fuse.w", xavier_uniform(rng, fin, Dx))
            self.add_param("fuse.b", np.zeros(Dx))
        elif config.fusion == "convolution":
            self.add_param("fuse.w", xavier_uniform(rng, fin, Dx).T[:, :, None].copy())
            self.add_param("fuse.b", np.zeros(Dx))
        else:
            self.add_param("tok.w", xavier_uniform(rng, Dc, Dx))
            self.add_param("tok.b", np.zeros(Dx))
            if config.gaze:
                self.add_param("gexp.w", xavier_uniform(rng, Dg, Dx))
                self.add_param("gexp.b", np.zeros(Dx))
        self.add_param("obj.w", xavier_uniform(rng, OBJECT_DIM, Dx))
        self.add_param("obj.b", np.zeros(Dx))
        self.add_param("pos", rng.normal(0.0, 0.02, size=(config.max_tokens, Dx)))
        F = config.ffn_mult * Dx
        for i in range(config.layers):
            pre = f"block{i}."
            for ln in ("ln1", "ln2"):
                self.add_param(pre + ln + ".g", np.ones(Dx))
                self.add_param(pre + ln + ".b", np.zeros(Dx))
            for w in ("wq", "wk", "wv", "wo"):
                self.add_param(pre + w, xavier_uniform(rng, Dx, Dx))
            self.add_param(pre + "bo", np.zeros(Dx))
            self.add_param(pre + "ff1.w", xavier_uniform(rng, Dx, F))
            self.add_param(pre + "ff1.b", np.zeros(F))
            self.add_param(pre + "ff2.w", xavier_uniform(rng, F, Dx))
            self.add_param(pre + "ff2.b", np.zeros(Dx))
        self.add_param("lnf.g", np.ones(Dx))
        self.add_param("lnf.b", np.zeros(Dx))
        self.add_param("head.w", xavier_uniform(rng, Dx, K))
        self.add_param("head.b", np.zeros(K))

    @property
    def K(self) -> int:
        return self.codebook.shape[0]

    # -------------------------------------------------------------- input prep

    def fit_world_normalization(self, samples: Sequence[TrajectorySample]) -> None:
        pts = np.concatenate([s.gaze for s in samples] + [o.points for s in samples for o in s.objects])
        self.buffers["world_mean"] = pts.mean(axis=0)
        self.buffers["world_scale"] = np.maximum(pts.std(axis=0), 1e-6)

    def normalize_gaze(self, pooled: np.ndarray) -> np.ndarray:
        return (pooled - self.buffers["world_mean"]) / self.buffers["world_scale"]

    def normalize_objects(self, objects: Sequence[ObjectSpec]) -> np.ndarray:
        code, _ = object_code(objects)
        mask = object_mask(objects)
        normed = (code.reshape(-1, 3) - self.buffers["world_mean"]) / self.buffers["world_scale"]
        return np.where(mask, normed.reshape(-1), 0.0)

    # ------------------------------------------------------------------ graph

    def embed_gaze(self, gaze: Tensor) -> Tensor:
        return ad.linear(gaze, self.p("gaze.w"), self.p("gaze.b"))

    def fuse(self, indices: np.ndarray, gaze: np.ndarray | None) -> Tensor:
        """Hand-token embeddings fused with (normalised, pooled) gaze: ``... x L x D_x``."""
        tok = Tensor(self.codebook[np.asarray(indices, dtype=np.int64)])
        cfg = self.config
        g = None
        if cfg.gaze:
            if gaze is None:
                raise AlignmentError("this generator expects gaze input")
            g = self.embed_gaze(Tensor(gaze))
        if cfg.fusion == "summation":
            f = ad.linear(tok, self.p("tok.w"), self.p("tok.b"))
            if g is not None:
                f = ad.add(f, ad.linear(g, self.p("gexp.w"), self.p("gexp.b")))
            return f
        x = ad.concat_lastdim([tok, g]) if g is not None else tok
        if cfg.fusion == "linear":
            return ad.relu(ad.linear(x, self.p("fuse.w"), self.p("fuse.b")))
        lead = x.shape[:-1]
        xc = ad.reshape(x, (-1, x.shape[-1]))  # N x C
        y = ad.conv1d(ad.transpose(xc, (1, 0)), self.p("fuse.w"), self.p("fuse.b"))  # D_x x N
        y = ad.reshape(ad.transpose(y, (1, 0)), (*lead, -1))
        return ad.relu(y)

    def condition(self, objects: np.ndarray, F: Tensor) -> Tensor:
        """Prepend the object token: ``B x L x D_x`` -> ``B x (L+1) x D_x``, add positions."""
        B, L, Dx = F.shape
        if L + 1 > self.config.max_tokens:
            raise ConfigurationError(f"sequence of {L + 1} tokens exceeds max_tokens={self.config.max_tokens}")
        o = ad.linear(Tensor(objects), self.p("obj.w"), self.p("obj.b"))
        empty = ~np.any(objects != 0.0, axis=-1)
        if empty.any():  # no context: the object token is exactly zero
            o = ad.mul(o, Tensor((~empty).astype(np.float64)[:, None]))
        X = ad.concat_axis([ad.reshape(o, (B, 1, Dx)), F], axis=1)
        pos = ad.gather_rows(self.p("pos"), np.arange(L + 1))
        return ad.add(X, pos)

    def attention(self, x: Tensor, i: int) -> Tensor:
        """Causal multi-head self-attention (no residual): ``B x L x D_x``."""
        pre = f"block{i}."
        B, L, Dx = x.shape
        h = self.config.heads
        dh = Dx // h

        def split(t):
            return ad.transpose(ad.reshape(t, (B, L, h, dh)), (0, 2, 1, 3))

        q = split(ad.linear(x, self.p(pre + "wq")))
        k = split(ad.linear(x, self.p(pre + "wk")))
        v = split(ad.linear(x, self.p(pre + "wv")))
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        future = np.triu(np.ones((L, L), dtype=bool), k=1)
        att = ad.softmax_rows(ad.masked_fill_additive(scores, future))
        ctx = ad.reshape(ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)), (B, L, Dx))
        return ad.linear(ctx, self.p(pre + "wo"), self.p(pre + "bo"))

    def block(self, x: Tensor, i: int) -> Tensor:
        pre = f"block{i}."
        a = self.attention(ad.layer_norm(x, self.p(pre + "ln1.g"), self.p(pre + "ln1.b")), i)
        x = ad.add(x, a)
        h = ad.layer_norm(x, self.p(pre + "ln2.g"), self.p(pre + "ln2.b"))
        h = ad.relu(ad.linear(h, self.p(pre + "ff1.w"), self.p(pre + "ff1.b")))
        h = ad.linear(h, self.p(pre + "ff2.w"), self.p(pre + "ff2.b"))
        return ad.add(x, h)

    def forward(self, indices: np.ndarray, gaze: np.ndarray | None, objects: np.ndarray,
                return_layers: bool = False):
        """Logits ``B x (L+1) x K`` for token prefixes ``B x L`` (row t predicts token t)."""
        indices = np.asarray(indices, dtype=np.int64)
        objects = np.asarray(objects, dtype=np.float64)
        if indices.ndim == 1:
            indices = indices[None]
            gaze = None if gaze is None else np.asarray(gaze)[None]
            objects = objects[None]
        B, L = indices.shape
        if L == 0:
            F = Tensor(np.zeros((B, 0, self.config.model_dim)))
        else:
            F = self.fuse(indices, gaze)
        x = self.condition(objects, F)
        layers = [x]
        for i in range(self.config.layers):
            x = self.block(x, i)
            layers.append(x)
        x = ad.layer_norm(x, self.p("lnf.g"), self.p("lnf.b"))
        logits = ad.linear(x, self.p("head.w"), self.p("head.b"))
        return (logits, layers) if return_layers else logits

    # ------------------------------------------------------------- prediction

    def predict_next_index(self, indices: Sequence[int], gaze: np.ndarray | None,
                           objects: np.ndarray) -> tuple[np.ndarray, int]:
        """Logits for the token after the prefix, and the greedy choice."""
        logits = self.forward(np.asarray(indices, dtype=np.int64), gaze, objects).data[0, -1]
        return logits, int(np.argmax(logits))

    def rollout(self, indices: Sequence[int], gaze: np.ndarray | None, objects: np.ndarray,
                n_future: int) -> np.ndarray:
        """Greedy autoregressive continuation of a token prefix by ``n_future`` tokens.

        Gaze for generated positions repeats the last observed gaze token.
        """
        if n_future < 1:
            raise ValueError(f"n_future_tokens must be >= 1, got {n_future}")
        seq = [int(i) for i in indices]
        g = None
        if self.config.gaze:
            g = np.asarray(gaze, dtype=np.float64)
            if len(g) != len(seq):
                raise AlignmentError(f"{len(g)} gaze tokens for {len(seq)} hand tokens")
        for _ in range(n_future):
            _, nxt = self.predict_next_index(seq, g, objects)
            seq.append(nxt)
            if g is not None:
                held = g[-1:] if len(g) else np.zeros((1, 3))
                g = np.concatenate([g, held], axis=0)
        return np.asarray(seq, dtype=np.int64)


def rollout_batch(gen: MotionGenerator, prefixes: np.ndarray, gaze: np.ndarray | None,
                  objects: np.ndarray, n_future: Sequence[int]) -> list[np.ndarray]:
    """Greedy rollout for a batch of equal-length prefixes with per-sample horizons.

    Equivalent to :meth:`MotionGenerator.rollout` per sample: causality makes the
    extra positions generated for shorter horizons irrelevant to earlier outputs.
    """
    prefixes = np.asarray(prefixes, dtype=np.int64)
    B, m = prefixes.shape
    steps = max(n_future)
    seq = np.zeros((B, m + steps), dtype=np.int64)
    seq[:, :m] = prefixes
    g = None
    if gen.config.gaze:
        g = np.concatenate([gaze, np.repeat(gaze[:, -1:], steps, axis=1)], axis=1)
    for k in range(steps):
        L = m + k
        logits = gen.forward(seq[:, :L], None if g is None else g[:, :L], objects).data[:, -1]
        seq[:, L] = logits.argmax(axis=-1)
    return [seq[b, : m + n] for b, n in enumerate(n_future)]


def prepare_inputs(vq: MotionVqVae, gen: MotionGenerator, frames: np.ndarray, gaze: np.ndarray,
                   objects: Sequence[ObjectSpec]):
    """Tokens, normalised pooled gaze and object vector for one observed prefix."""
    enc = vq.encode(frames)
    tokens = vq.quantize(enc.latents).indices
    g = None
    if gen.config.gaze:
        gz = np.asarray(gaze, dtype=np.float64)
        if len(gz) != len(frames):
            raise AlignmentError(f"{len(gz)} gaze frames for {len(frames)} hand frames")
        if enc.pad:
            gz = np.concatenate([gz, np.repeat(gz[-1:], enc.pad, axis=0)])
        g = gen.normalize_gaze(pool_gaze(gz, vq.l, len(tokens)))
    return tokens, g, gen.normalize_objects(objects)


def generate(vq: MotionVqVae, gen: MotionGenerator, frames: np.ndarray, gaze: np.ndarray,
             objects: Sequence[ObjectSpec], n_future_tokens: int) -> Prediction:
    """Predict ``n_future_tokens`` tokens after the observed frames and decode everything."""
    if n_future_tokens < 1:
        raise ValueError(f"horizon must be >= 1 token, got {n_future_tokens}")
    tokens, g, obj = prepare_inputs(vq, gen, frames, gaze, objects)
    seq = gen.rollout(tokens, g, obj, n_future_tokens)
    return Prediction(seq, len(tokens), vq.decode_indices(seq))


# --------------------------------------------------------------------- training


@dataclass
class TokenizedSample:
    tokens: np.ndarray
    gaze: np.ndarray | None  # T_d x 3 normalised
    objects: np.ndarray


def tokenize_dataset(vq: MotionVqVae, gen: MotionGenerator,
                     samples: Sequence[TrajectorySample]) -> list[TokenizedSample]:
    """Encode full sequences with the frozen VQ-VAE, batched by length."""
    out: list[TokenizedSample | None] = [None] * len(samples)
    by_len: dict[int, list[int]] = {}
    for i, s in enumerate(samples):
        by_len.setdefault(len(s.frames), []).append(i)
    for T, idxs in sorted(by_len.items()):
        if T % vq.l:
            for i in idxs:
                s = samples[i]
                tok, g, obj = prepare_inputs(vq, gen, s.frames, s.gaze, s.objects)
                out[i] = TokenizedSample(tok, g, obj)
            continue
        for j in range(0, len(idxs), 64):
            chunk = idxs[j: j + 64]
            lat = vq.encode_batch([samples[i].frames for i in chunk])
            toks = vq.quantize(lat).indices
            for i, tok in zip(chunk, toks):
                s = samples[i]
                g = gen.normalize_gaze(pool_gaze(s.gaze, vq.l, len(tok))) if gen.config.gaze else None
                out[i] = TokenizedSample(tok, g, gen.normalize_objects(s.objects))
    return out  # type: ignore[return-value]


def sequence_weights(n_tokens: Sequence[int], L: int, w_last: float) -> np.ndarray:
    """Per-position loss weights: 1 on real tokens, ``w_last`` on each final token, 0 on padding."""
    w = np.zeros((len(n_tokens), L))
    for b, n in enumerate(n_tokens):
        w[b, :n] = 1.0
        w[b, n - 1] = w_last
    return w


def batch_loss(gen: MotionGenerator, batch: Sequence[TokenizedSample]):
    """Teacher-forced weighted cross-entropy (summed per sequence, averaged over the batch)."""
    L = max(len(s.tokens) for s in batch)
    B = len(batch)
    idx = np.zeros((B, L), dtype=np.int64)
    gz = np.zeros((B, L, 3)) if gen.config.gaze else None
    obj = np.stack([s.objects for s in batch])
    for b, s in enumerate(batch):
        n = len(s.tokens)
        idx[b, :n] = s.tokens
        if gz is not None:
            gz[b, :n] = s.gaze
            gz[b, n:] = s.gaze[-1]
    weights = sequence_weights([len(s.tokens) for s in batch], L, gen.config.w_last)
    # inputs are tokens 0..L-2; row t of the output predicts token t
    logits = gen.forward(idx[:, : L - 1], None if gz is None else gz[:, : L - 1], obj)
    flat = ad.reshape(logits, (B * L, gen.K))
    ce = ad.cross_entropy(flat, idx.reshape(-1), weights.reshape(-1))
    loss = ad.scale(ce, 1.0 / B)
    pred = logits.data.argmax(axis=-1)
    real = weights > 0
    correct = int(((pred == idx) & real).sum())
    return loss, correct, int(real.sum())


def train_generator(vq: MotionVqVae, samples: Sequence[TrajectorySample],
                    config: GeneratorConfig | None = None,
                    progress: bool = False) -> tuple[MotionGenerator, GeneratorHistory]:
    """Teacher-forced training on top of a frozen VQ-VAE."""
    config = config or GeneratorConfig()
    config.validate()
    if len(samples) == 0:
        raise ValueError("empty training set")
    vq.freeze()
    rng = np.random.default_rng(config.seed)
    gen = MotionGenerator(vq.codebook, config, rng)
    gen.fit_world_normalization(samples)
    data = tokenize_dataset(vq, gen, samples)
    longest = max(len(d.tokens) for d in data)
    if longest > config.max_tokens:
        raise ConfigurationError(f"sequences of {longest} tokens exceed max_tokens={config.max_tokens}")
    state = ad.OptimizerState(lr=config.lr)
    hist = GeneratorHistory()
    t0 = time.perf_counter()
    for epoch in range(config.epochs):
        order = rng.permutation(len(data))
        total, correct, count, nb = 0.0, 0, 0, 0
        for b in range(0, len(order), config.batch_size):
            batch = [data[i] for i in order[b: b + config.batch_size]]
            try:
                with Tape() as tape:
                    loss, c, n = batch_loss(gen, batch)
                ad.zero_grads(gen.params.values())
                tape.backward(loss)
                ad.optimizer_step(gen.params, state, clip_norm=1.0)
            except (ad.NumericalError, TrainingError) as exc:
                raise TrainingError(f"generator diverged at epoch {epoch} batch {nb}: {exc}") from exc
            total += float(loss.data)
            correct += c
            count += n
            nb += 1
        hist.loss.append(total / nb)
        hist.accuracy.append(correct / max(count, 1))
        if progress and (epoch % 10 == 0 or epoch == config.epochs - 1):
            log.info("generator epoch %d loss %.4f acc %.3f", epoch, hist.loss[-1], hist.accuracy[-1])
    hist.seconds = time.perf_counter() - t0
    gen.freeze()
    return gen, hist


def config_dict(config: GeneratorConfig) -> dict:
    return asdict(config)
