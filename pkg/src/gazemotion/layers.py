"""Parameter containers and initialisers shared by the two models."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor


class Module:
    """Holds trainable ``params`` and constant ``buffers`` as flat, ordered dicts."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def p(self, name: str) -> Tensor:
        return self.params[name]

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {k: v.data.copy() for k, v in self.params.items()}
        out.update({f"buffer.{k}": v.copy() for k, v in self.buffers.items()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, t in self.params.items():
            if k not in state:
                raise KeyError(f"missing tensor {k!r}")
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != t.shape:
                raise ValueError(f"tensor {k!r}: shape {arr.shape} != {t.shape}")
            t.data = arr.copy()
        for k in self.buffers:
            self.buffers[k] = np.asarray(state[f"buffer.{k}"], dtype=np.float64).copy()

    def freeze(self) -> None:
        for t in self.params.values():
            t.requires_grad = False
            t.grad = None


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, gain: float = 1.0) -> np.ndarray:
    return rng.normal(0.0, gain * np.sqrt(2.0 / fan_in), size=shape)


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))
