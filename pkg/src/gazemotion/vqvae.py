"""Hand-motion VQ-VAE: temporal conv encoder, nearest-neighbour codebook, upsampling decoder."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, TrainingError
from .hand import POSE_DIM
from .layers import Module, he_normal

log = logging.getLogger(__name__)


class ConfigurationError(ValueError):
    pass


class SequenceTooShortError(ValueError):
    pass


@dataclass
class VqVaeConfig:
    codebook_size: int = 64
    code_dim: int = 32
    downsample: int = 4
    hidden_channels: int = 128
    kernel: int = 3
    beta: float = 1.0
    gamma: float = 0.25
    epochs: int = 200
    batch_size: int = 32
    lr: float = 3e-4
    seed: int = 0

    def validate(self) -> None:
        if self.downsample != 4:
            raise ConfigurationError("the encoder has two stride-2 stages, so downsample must be 4")
        if self.codebook_size < 2 or self.code_dim < 1:
            raise ConfigurationError("need codebook_size >= 2 and code_dim >= 1")
        if self.gamma <= 0 or self.beta <= 0:
            raise ConfigurationError("gamma and beta must be > 0")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigurationError("kernel width must be odd and >= 1")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigurationError("epochs >= 0, batch_size >= 1 and lr > 0 required")


@dataclass
class QuantizationResult:
    embeddings: np.ndarray  # T_d x D_c, rows of the codebook
    indices: np.ndarray  # T_d ints in [0, K)
    encoder_out: np.ndarray  # T_d x D_c


@dataclass
class Encoded:
    latents: np.ndarray  # T_d x D_c
    pad: int  # frames appended by last-frame repetition


@dataclass
class VqVaeHistory:
    total: list[float] = field(default_factory=list)
    recon: list[float] = field(default_factory=list)
    embed: list[float] = field(default_factory=list)
    commit: list[float] = field(default_factory=list)
    resets: list[int] = field(default_factory=list)
    usage: np.ndarray | None = None
    seconds: float = 0.0

    def summary(self) -> dict:
        return {
            "epochs": len(self.total),
            "final_total": self.total[-1] if self.total else None,
            "final_recon": self.recon[-1] if self.recon else None,
            "dead_code_resets": int(sum(self.resets)),
            "codes_used": int((self.usage > 0).sum()) if self.usage is not None else None,
            "seconds": round(self.seconds, 3),
        }


def nearest_codes(vectors: np.ndarray, codebook: np.ndarray, chunk: int = 2048) -> np.ndarray:
    """Index of the nearest codebook row for every vector; lowest index wins ties."""
    if codebook.shape[0] == 0:
        raise ConfigurationError("empty codebook")
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.shape[-1] != codebook.shape[1]:
        raise ConfigurationError(f"latent dim {vectors.shape[-1]} != codebook dim {codebook.shape[1]}")
    flat = vectors.reshape(-1, codebook.shape[1])
    out = np.empty(len(flat), dtype=np.int64)
    for i in range(0, len(flat), chunk):
        block = flat[i: i + chunk]
        d2 = ((block[:, None, :] - codebook[None, :, :]) ** 2).sum(axis=-1)
        out[i: i + chunk] = np.argmin(d2, axis=1)
    return out.reshape(vectors.shape[:-1])


def quantize(E: np.ndarray, codebook: np.ndarray) -> QuantizationResult:
    idx = nearest_codes(E, codebook)
    return QuantizationResult(codebook[idx].copy(), idx, np.asarray(E, dtype=np.float64))


def vqvae_loss(H: Tensor, H_hat: Tensor, E: Tensor, Q: Tensor, beta: float = 1.0, gamma: float = 0.25):
    """Return ``(total, recon, embed, commit)`` tensors.

    ``embed`` moves only the codebook (encoder output detached); ``commit`` moves
    only the encoder (codebook detached).
    """
    recon = ad.smooth_l1(H, H_hat, beta)
    embed = ad.mse(ad.stop_gradient(E), Q)
    commit = ad.scale(ad.mse(E, ad.stop_gradient(Q)), gamma)
    total = ad.add(ad.add(recon, embed), commit)
    return total, recon, embed, commit


def pad_to_multiple(frames: np.ndarray, l: int) -> tuple[np.ndarray, int]:
    T = len(frames)
    pad = (-T) % l
    if pad:
        frames = np.concatenate([frames, np.repeat(frames[-1:], pad, axis=0)], axis=0)
    return frames, pad


class MotionVqVae(Module):
    def __init__(self, config: VqVaeConfig | None = None, rng: np.random.Generator | None = None):
        super().__init__()
        self.config = config = config or VqVaeConfig()
        config.validate()
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        H, D, k = config.hidden_channels, config.code_dim, config.kernel
        self.buffers["mean"] = np.zeros(POSE_DIM)
        self.buffers["scale"] = np.ones(POSE_DIM)
        layers = [("enc1", H, POSE_DIM), ("enc2", H, H), ("enc3", D, H),
                  ("dec0", H, D), ("dec1", H, H), ("dec2", H, H), ("dec3", POSE_DIM, H)]
        for name, cout, cin in layers:
            gain = 0.5 if name in ("enc3", "dec3") else 1.0
            self.add_param(f"{name}.w", he_normal(rng, (cout, cin, k), cin * k, gain))
            self.add_param(f"{name}.b", np.zeros(cout))
        self.add_param("codebook", rng.normal(0.0, 1.0, size=(config.codebook_size, D)))

    @property
    def codebook(self) -> np.ndarray:
        return self.params["codebook"].data

    @property
    def l(self) -> int:
        return self.config.downsample

    # ------------------------------------------------------------ normalisation

    def fit_normalization(self, samples: Sequence[np.ndarray]) -> None:
        """Mean pose per channel, one std per spatial axis (x, y, z)."""
        allf = np.concatenate([np.asarray(s) for s in samples], axis=0)
        self.buffers["mean"] = allf.mean(axis=0)
        axis_std = (allf - self.buffers["mean"]).reshape(-1, 3).std(axis=0)
        self.buffers["scale"] = np.tile(np.maximum(axis_std, 1e-6), POSE_DIM // 3)

    def normalize(self, frames: np.ndarray) -> np.ndarray:
        return (frames - self.buffers["mean"]) / self.buffers["scale"]

    def denormalize(self, z: np.ndarray) -> np.ndarray:
        return z * self.buffers["scale"] + self.buffers["mean"]

    # -------------------------------------------------------------- graph parts

    def _conv(self, x: Tensor, name: str, stride: int = 1) -> Tensor:
        pad = self.config.kernel // 2
        return ad.conv1d(x, self.p(f"{name}.w"), self.p(f"{name}.b"), stride=stride, padding=pad)

    def encoder_graph(self, x: Tensor) -> Tensor:
        """``B x 126 x T`` normalised poses -> ``B x D_c x T/4`` latents."""
        h = ad.relu(self._conv(x, "enc1", stride=2))
        h = ad.relu(self._conv(h, "enc2", stride=2))
        return self._conv(h, "enc3")

    def decoder_graph(self, q: Tensor) -> Tensor:
        """``B x D_c x T_d`` -> ``B x 126 x 4 T_d`` normalised poses."""
        h = ad.relu(self._conv(q, "dec0"))
        h = ad.relu(self._conv(ad.nn_upsample(h, 2), "dec1"))
        h = ad.relu(self._conv(ad.nn_upsample(h, 2), "dec2"))
        return self._conv(h, "dec3")

    def _batch_input(self, batch: Sequence[np.ndarray]) -> Tensor:
        return Tensor(np.stack([self.normalize(f).T for f in batch]))

    # ---------------------------------------------------------------- inference

    def encode(self, frames: np.ndarray) -> Encoded:
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[1] != POSE_DIM:
            raise ValueError(f"expected T x {POSE_DIM} frames, got {frames.shape}")
        if len(frames) < self.l:
            raise SequenceTooShortError(f"need at least {self.l} frames, got {len(frames)}")
        padded, pad = pad_to_multiple(frames, self.l)
        E = self.encoder_graph(self._batch_input([padded])).data[0].T
        return Encoded(E, pad)

    def encode_batch(self, batch: Sequence[np.ndarray]) -> np.ndarray:
        """Latents for equal-length sequences (length a multiple of l): B x T_d x D_c."""
        return self.encoder_graph(self._batch_input(batch)).data.transpose(0, 2, 1)

    def quantize(self, E: np.ndarray) -> QuantizationResult:
        return quantize(E, self.codebook)

    def tokenize(self, frames: np.ndarray) -> np.ndarray:
        return self.quantize(self.encode(frames).latents).indices

    def decode(self, Q: np.ndarray) -> np.ndarray:
        """Codebook embeddings (T_d x D_c) -> T_d * l frames of 126-d poses in metres."""
        Q = np.asarray(Q, dtype=np.float64)
        if Q.ndim != 2 or len(Q) == 0:
            raise ValueError(f"decode needs a non-empty T_d x D_c array, got {Q.shape}")
        return self.decode_batch(Q[None])[0]

    def decode_batch(self, Q: np.ndarray) -> np.ndarray:
        out = self.decoder_graph(Tensor(np.asarray(Q).transpose(0, 2, 1))).data
        return self.denormalize(out.transpose(0, 2, 1))

    def decode_indices(self, indices: Sequence[int]) -> np.ndarray:
        return self.decode(self.codebook[np.asarray(indices, dtype=np.int64)])

    def reconstruct(self, frames: np.ndarray) -> np.ndarray:
        """encode -> quantize -> decode, trimmed back to the input length."""
        enc = self.encode(frames)
        out = self.decode(self.quantize(enc.latents).embeddings)
        return out[: len(frames)]

    # ----------------------------------------------------------------- training

    def forward_loss(self, x: Tensor):
        """Training graph on a normalised ``B x 126 x T`` batch.

        Returns ``(losses, indices, latents)``; the decoder sees the quantised
        latents through a straight-through connection.
        """
        E = self.encoder_graph(x)
        B, D, Td = E.shape
        idx = nearest_codes(E.data.transpose(0, 2, 1), self.codebook)
        Q = ad.transpose(ad.gather_rows(self.params["codebook"], idx), (0, 2, 1))
        Q_st = ad.add(E, ad.stop_gradient(ad.sub(Q, E)))
        x_hat = self.decoder_graph(Q_st)
        losses = vqvae_loss(x, x_hat, E, Q, self.config.beta, self.config.gamma)
        return losses, idx, E.data.transpose(0, 2, 1).reshape(-1, D)


def length_batches(lengths: Sequence[int], batch_size: int, rng: np.random.Generator) -> list[list[int]]:
    """Shuffle, then group indices by sequence length into batches (order seeded by ``rng``)."""
    order = rng.permutation(len(lengths))
    buckets: dict[int, list[int]] = {}
    for i in order:
        buckets.setdefault(int(lengths[i]), []).append(int(i))
    batches = []
    for T in sorted(buckets):
        items = buckets[T]
        batches += [items[j: j + batch_size] for j in range(0, len(items), batch_size)]
    perm = rng.permutation(len(batches))
    return [batches[j] for j in perm]


def train_vqvae(sequences: Sequence[np.ndarray], config: VqVaeConfig | None = None,
                progress: bool = False) -> tuple[MotionVqVae, VqVaeHistory]:
    """Fit the VQ-VAE on a list of ``T x 126`` pose sequences.

    Codes unused over an epoch are re-seeded to distinct encoder outputs seen in
    that epoch.  Non-finite losses or gradients raise :class:`TrainingError`
    naming the epoch and batch.
    """
    config = config or VqVaeConfig()
    config.validate()
    if len(sequences) == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(config.seed)
    model = MotionVqVae(config, rng)
    model.fit_normalization(sequences)
    padded = [pad_to_multiple(np.asarray(s, dtype=np.float64), config.downsample)[0] for s in sequences]
    normed = [model.normalize(s).T for s in padded]
    lengths = [s.shape[1] for s in normed]
    state = ad.OptimizerState(lr=config.lr)
    hist = VqVaeHistory()
    K = config.codebook_size
    t0 = time.perf_counter()

    # data-dependent codebook init from the first batch's encodings
    first = length_batches(lengths, config.batch_size, np.random.default_rng(config.seed + 1))[0]
    E0 = model.encode_batch([padded[i] for i in first]).reshape(-1, config.code_dim)
    pick = rng.choice(len(E0), size=K, replace=len(E0) < K)
    model.params["codebook"].data = E0[pick] + rng.normal(0.0, 1e-3, size=(K, config.code_dim))

    for epoch in range(config.epochs):
        usage = np.zeros(K, dtype=np.int64)
        sums = np.zeros(4)
        count = 0
        pool = []
        for b, batch in enumerate(length_batches(lengths, config.batch_size, rng)):
            x = Tensor(np.stack([normed[i] for i in batch]))
            try:
                with Tape() as tape:
                    losses, idx, latents = model.forward_loss(x)
                ad.zero_grads(model.params.values())
                tape.backward(losses[0])
                ad.optimizer_step(model.params, state)
            except (ad.NumericalError, TrainingError) as exc:
                raise TrainingError(f"VQ-VAE diverged at epoch {epoch} batch {b}: {exc}") from exc
            usage += np.bincount(idx.reshape(-1), minlength=K)
            sums += [float(t.data) for t in losses]
            count += 1
            pool.append(latents)
        means = sums / max(count, 1)
        hist.total.append(float(means[0]))
        hist.recon.append(float(means[1]))
        hist.embed.append(float(means[2]))
        hist.commit.append(float(means[3]))
        dead = np.flatnonzero(usage == 0)
        if len(dead) and epoch < config.epochs - 1:
            _reseed_codes(model, state, dead, np.concatenate(pool), rng)
        hist.resets.append(int(len(dead)) if epoch < config.epochs - 1 else 0)
        hist.usage = usage
        if progress and (epoch % 10 == 0 or epoch == config.epochs - 1):
            log.info("vqvae epoch %d loss %.5f recon %.5f dead %d", epoch, means[0], means[1], len(dead))
    hist.seconds = time.perf_counter() - t0
    return model, hist


def _reseed_codes(model: MotionVqVae, state: ad.OptimizerState, dead: np.ndarray,
                  latents: np.ndarray, rng: np.random.Generator) -> None:
    cb = model.params["codebook"].data
    pick = rng.choice(len(latents), size=len(dead), replace=len(latents) < len(dead))
    fresh = latents[pick] + rng.normal(0.0, 1e-4, size=(len(dead), cb.shape[1]))
    cb[dead] = fresh
    if "codebook" in state.m:
        state.m["codebook"][dead] = 0.0
        state.v["codebook"][dead] = 0.0


def config_dict(config: VqVaeConfig) -> dict:
    return asdict(config)
