"""Minimal reverse-mode tensor engine on top of numpy (float64).

Operations record themselves on the active :class:`Tape` whenever at least one
input requires a gradient.  ``Tape.backward`` walks the recorded nodes once, in
reverse order, and accumulates gradients into leaf tensors.

    >>> w = Tensor(np.ones((2, 2)), requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_all(linear(Tensor([[1.0, 2.0]]), w))
    >>> tape.backward(loss)
    >>> w.grad.tolist()
    [[1.0, 1.0], [2.0, 2.0]]
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    pass


class NumericalError(FloatingPointError):
    pass


class ContractError(RuntimeError):
    pass


class TrainingError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "is_leaf", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericalError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.is_leaf = True
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; tapes nest per thread and each thread has its own
    stack, so independent tapes may run in separate threads.
    """

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        assert stack and stack[-1] is self
        stack.pop()

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward, op: str) -> None:
        out.requires_grad = True
        out.is_leaf = False
        self.nodes.append(Node(out, inputs, backward, op))

    def backward(self, loss: Tensor) -> None:
        """Populate ``.grad`` of every leaf tensor that ``loss`` depends on."""
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                if not np.all(np.isfinite(gi)):
                    raise NumericalError(f"non-finite gradient flowing out of {node.op}")
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if inp.is_leaf:
                    leaves[key] = inp
        for key, t in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            t.grad = g.copy() if t.grad is None else t.grad + g
        self.nodes.clear()


_local = threading.local()


def _tape_stack() -> list[Tape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def _active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], backward, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"non-finite output from {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.grad = None
    out.is_leaf = True
    out.name = None
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(out, inputs, backward, op)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.shape, b.shape
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, sa), _unbroadcast(g * a.data, sb)), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def stop_gradient(x: Tensor) -> Tensor:
    """Return a constant copy: nothing upstream receives gradient through it."""
    return Tensor(x.data.copy())


# -------------------------------------------------------------------- shaping


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                 lambda g: (g.transpose(inv),), "transpose")


def concat_lastdim(tensors: Sequence[Tensor]) -> Tensor:
    if not tensors:
        raise DimensionError("concat of nothing")
    sizes = [t.shape[-1] for t in tensors]
    lead = tensors[0].shape[:-1]
    for t in tensors:
        if t.shape[:-1] != lead:
            raise DimensionError(f"concat leading dims differ: {lead} vs {t.shape[:-1]}")
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=-1))

    return _make(np.concatenate([t.data for t in tensors], axis=-1), tuple(tensors), back, "concat")


def concat_axis(tensors: Sequence[Tensor], axis: int) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                 lambda g: tuple(np.split(g, cuts, axis=axis)), "concat_axis")


def gather_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """``table[index]`` for an integer array of any shape; rows of a 2-D table."""
    index = np.asarray(index, dtype=np.int64)
    k = table.shape[0]

    def back(g):
        out = np.zeros_like(table.data)
        np.add.at(out, index.reshape(-1), g.reshape(-1, table.shape[1]))
        return (out,)

    if index.size and (index.min() < 0 or index.max() >= k):
        raise IndexError(f"row index out of range [0, {k})")
    return _make(table.data[index], (table,), back, "gather_rows")


def nn_upsample(x: Tensor, factor: int) -> Tensor:
    """Repeat every step along the last (time) axis ``factor`` times."""
    if factor < 1:
        raise DimensionError("upsample factor must be >= 1")
    if x.data.size == 0:
        raise DimensionError("upsample of empty tensor")
    shape = x.shape

    def back(g):
        return (g.reshape(*shape, factor).sum(axis=-1),)

    return _make(np.repeat(x.data, factor, axis=-1), (x,), back, "nn_upsample")


# ------------------------------------------------------------------ reductions


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    return _make(np.array(x.data.mean()), (x,),
                 lambda g: (np.broadcast_to(g / n, shape).copy(),), "mean")


# ----------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched ``a @ b`` with numpy broadcasting over leading dims."""
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    sa, sb = a.shape, b.shape

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, sa), _unbroadcast(gb, sb)

    return _make(a.data @ b.data, (a, b), back, "matmul")


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ W + b`` over the last axis of ``x`` (any number of leading dims)."""
    if W.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise DimensionError(f"linear: x{x.shape} incompatible with W{W.shape}")
    if b is not None and b.shape != (W.shape[1],):
        raise DimensionError(f"linear: bias {b.shape} does not match W{W.shape}")
    x2 = x.data.reshape(-1, W.shape[0])
    out = (x2 @ W.data).reshape(*x.shape[:-1], W.shape[1])
    if b is not None:
        out = out + b.data

    def back(g):
        g2 = g.reshape(-1, W.shape[1])
        gx = (g2 @ W.data.T).reshape(x.shape)
        gW = x2.T @ g2
        gb = g2.sum(axis=0) if b is not None else None
        return (gx, gW, gb) if b is not None else (gx, gW)

    inputs = (x, W, b) if b is not None else (x, W)
    return _make(out, inputs, back, "linear")


def conv1d(x: Tensor, kernels: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation over time.

    ``x`` is ``C_in x T`` or batched ``B x C_in x T``; ``kernels`` is
    ``C_out x C_in x k``.  Output length is ``(T + 2p - k) // stride + 1``.
    """
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 3 or kernels.ndim != 3:
        raise DimensionError(f"conv1d expects (B,)C,T input and 3-D kernels, got {x.shape}, {kernels.shape}")
    B, C, T = xd.shape
    Co, Ci, k = kernels.shape
    if Ci != C:
        raise DimensionError(f"conv1d channel mismatch: input {C}, kernels {Ci}")
    if k < 1 or stride < 1 or padding < 0:
        raise DimensionError("conv1d needs k >= 1, stride >= 1, padding >= 0")
    T_out = (T + 2 * padding - k) // stride + 1
    if T + 2 * padding < k or T_out < 1:
        raise DimensionError(f"conv1d output length < 1 (T={T}, k={k}, pad={padding})")
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding))) if padding else xd
    span = stride * (T_out - 1) + 1
    # im2col rows: cols[b * T_out + t, c * k + j] = xp[b, c, t * stride + j]
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=2)[:, :, :span:stride]
    cols = win.transpose(0, 2, 1, 3).reshape(B * T_out, C * k)
    Wm = kernels.data.reshape(Co, C * k)
    out = cols @ Wm.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(B, T_out, Co).transpose(0, 2, 1))
    if squeeze:
        out = out[0]

    def back(g):
        g3 = g[None] if squeeze else g
        gt = g3.transpose(0, 2, 1).reshape(B * T_out, Co)
        gW = (gt.T @ cols).reshape(Co, Ci, k)
        gcols = (gt @ Wm).reshape(B, T_out, C, k).transpose(0, 2, 1, 3)
        gxp = np.zeros_like(xp)
        for j in range(k):
            gxp[:, :, j: j + span: stride] += gcols[:, :, :, j]
        gx = gxp[:, :, padding: padding + T] if padding else gxp
        if squeeze:
            gx = gx[0]
        grads = [gx, gW]
        if bias is not None:
            grads.append(gt.sum(axis=0))
        return tuple(grads)

    inputs = (x, kernels) if bias is None else (x, kernels, bias)
    return _make(out, inputs, back, "conv1d")


# ------------------------------------------------------------- normalisations


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows(x: Tensor) -> Tensor:
    if x.data.size == 0 or x.shape[-1] == 0:
        raise DimensionError("softmax of empty rows")
    y = _softmax(x.data)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), back, "softmax")


def masked_fill_additive(x: Tensor, mask: np.ndarray) -> Tensor:
    """Set entries where ``mask`` is True to a large negative constant.

    Masked entries receive no gradient.  A finite constant keeps the
    finiteness check meaningful; after softmax its weight underflows to 0.
    """
    keep = ~mask
    return _make(np.where(mask, -1e30, x.data), (x,), lambda g: (g * keep,), "mask")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    n = x.shape[-1]

    def back(g):
        lead = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=lead)
        gb = g.sum(axis=lead)
        gx_hat = g * gamma.data
        gx = inv / n * (n * gx_hat - gx_hat.sum(axis=-1, keepdims=True)
                        - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True))
        return gx, gg, gb

    return _make(xhat * gamma.data + beta.data, (x, gamma, beta), back, "layer_norm")


# --------------------------------------------------------------------- losses


def smooth_l1(h: Tensor, h_hat: Tensor, beta: float = 1.0) -> Tensor:
    """Mean smooth-L1: 0.5 d^2 / beta inside |d| < beta, |d| - 0.5 beta outside."""
    if beta <= 0:
        raise ValueError(f"smooth_l1 beta must be > 0, got {beta}")
    if h.shape != h_hat.shape:
        raise DimensionError(f"smooth_l1 shape mismatch {h.shape} vs {h_hat.shape}")
    d = h.data - h_hat.data
    ad = np.abs(d)
    inside = ad < beta
    vals = np.where(inside, 0.5 * d * d / beta, ad - 0.5 * beta)
    n = d.size

    def back(g):
        gd = np.where(inside, d / beta, np.sign(d)) * (g / n)
        return gd, -gd

    return _make(np.array(vals.mean()), (h, h_hat), back, "smooth_l1")


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean of squared elementwise differences."""
    if a.shape != b.shape:
        raise DimensionError(f"mse shape mismatch {a.shape} vs {b.shape}")
    d = a.data - b.data
    n = d.size

    def back(g):
        gd = 2.0 * d * (g / n)
        return gd, -gd

    return _make(np.array((d * d).mean()), (a, b), back, "mse")


def cross_entropy(logits: Tensor, targets, weights=None) -> Tensor:
    """Weighted sum of negative log-likelihoods: ``-sum_t w_t log softmax(z_t)[y_t]``.

    ``logits`` is ``N x K``; zero weights mark padding rows.
    """
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects N x K logits, got {logits.shape}")
    N, K = logits.shape
    y = np.asarray(targets, dtype=np.int64).reshape(-1)
    w = np.ones(N) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    if len(y) != N or len(w) != N:
        raise DimensionError(f"cross_entropy: {N} rows, {len(y)} targets, {len(w)} weights")
    if N and (y.min() < 0 or y.max() >= K):
        raise IndexError(f"cross_entropy target out of range [0, {K})")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    rows = np.arange(N)
    loss = -(w * logp[rows, y]).sum()

    def back(g):
        p = np.exp(logp)
        p[rows, y] -= 1.0
        return (p * (w * g)[:, None],)

    return _make(np.array(loss), (logits,), back, "cross_entropy")


# ------------------------------------------------------------------ optimizer


@dataclass
class OptimizerState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def optimizer_step(params: dict[str, Tensor], state: OptimizerState,
                   clip_norm: float | None = None) -> None:
    """One bias-corrected adaptive-moment update, in place.

    Parameters without a gradient are left untouched.  ``clip_norm`` rescales the
    global gradient norm before the update.
    """
    grads = {}
    for name, p in params.items():
        if p.grad is None:
            continue
        if p.grad.shape != p.data.shape:
            raise DimensionError(f"gradient shape {p.grad.shape} != parameter {name} {p.shape}")
        if not np.all(np.isfinite(p.grad)):
            raise TrainingError(f"non-finite gradient for parameter {name!r} at step {state.step + 1}")
        grads[name] = p.grad
    if clip_norm is not None and grads:
        total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        if total > clip_norm:
            grads = {k: g * (clip_norm / total) for k, g in grads.items()}
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ------------------------------------------------------------ gradient check


def numerical_grad(f: Callable[[], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` w.r.t. array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def grad_check(build: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Worst per-parameter relative error between tape gradients and finite differences.

    ``build`` recomputes the scalar loss from the current parameter values.  The
    error of one parameter tensor is ``||a - n|| / max(||a||, ||n||, 1e-12)``.
    """
    for p in params:
        p.requires_grad = True
        p.grad = None
    with Tape() as tape:
        loss = build()
    tape.backward(loss)
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = numerical_grad(lambda: float(build().data), p.data, eps)
        denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
        worst = max(worst, float(np.linalg.norm(analytic - numeric) / denom))
    return worst
