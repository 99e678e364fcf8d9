"""Small dense reverse-mode autodiff core on top of numpy.

Everything is float64. The operator set is closed: it covers what the tabular
transformer and its losses need (matmul, elementwise arithmetic, softmax,
layer normalization, GELU/ReLU, embedding lookup, reductions, binary
cross-entropy) plus the shape plumbing those ops require.
"""

from __future__ import annotations

import contextlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

WEIGHTS_FORMAT_VERSION = 1
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (inference)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, parents=(), backward=None, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, name={self.name!r})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def backward(self):
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name=None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _make(data, parents, backward_fn) -> Tensor:
    parents = tuple(p for p in parents if isinstance(p, Tensor))
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, parents=parents if needs else (), backward=backward_fn if needs else None)


def _acc(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    # grads are never mutated in place, so aliasing the incoming array is safe
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


# ---------------------------------------------------------------- operators


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = None

    def _bw():
        _acc(a, _unbroadcast(out.grad, a.shape))
        _acc(b, _unbroadcast(out.grad, b.shape))

    out = _make(a.data + b.data, (a, b), _bw)
    return out


def neg(a) -> Tensor:
    a = as_tensor(a)
    out = None

    def _bw():
        _acc(a, -out.grad)

    out = _make(-a.data, (a,), _bw)
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = None

    def _bw():
        _acc(a, _unbroadcast(out.grad * b.data, a.shape))
        _acc(b, _unbroadcast(out.grad * a.data, b.shape))

    out = _make(a.data * b.data, (a, b), _bw)
    return out


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    out = None

    def _bw():
        g = out.grad
        if a.requires_grad:
            _acc(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                # fold the batch dims instead of materializing per-sample products
                a2 = a.data.reshape(-1, a.shape[-1])
                _acc(b, a2.T @ g.reshape(-1, g.shape[-1]))
            else:
                _acc(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    out = _make(a.data @ b.data, (a, b), _bw)
    return out


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = None

    def _bw():
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _acc(a, np.broadcast_to(g, a.shape))

    out = _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), _bw)
    return out


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis, keepdims), 1.0 / float(count))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = None

    def _bw():
        _acc(a, out.grad.reshape(a.shape))

    out = _make(a.data.reshape(shape), (a,), _bw)
    return out


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = None

    def _bw():
        _acc(a, np.transpose(out.grad, inverse))

    out = _make(np.transpose(a.data, axes), (a,), _bw)
    return out


def take(a, index) -> Tensor:
    """Basic/advanced indexing with scatter-add in the backward pass."""
    a = as_tensor(a)
    out = None

    basic = all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in (index if isinstance(index, tuple) else (index,)))

    def _bw():
        g = np.zeros_like(a.data)
        if basic:
            g[index] = out.grad
        else:
            np.add.at(g, index, out.grad)
        _acc(a, g)

    out = _make(a.data[index], (a,), _bw)
    return out


def concat(tensors: Sequence, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = None

    def _bw():
        for t, g in zip(tensors, np.split(out.grad, splits, axis=axis)):
            _acc(t, g)

    out = _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, _bw)
    return out


def softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    out = None

    def _bw():
        g = out.grad
        _acc(a, s * (g - (g * s).sum(axis=axis, keepdims=True)))

    out = _make(s, (a,), _bw)
    return out


def layer_norm(a, gamma=None, beta=None, eps=1e-9) -> Tensor:
    """Normalize over the last axis, then apply the optional affine map."""
    a = as_tensor(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    normed = None

    def _bw():
        g = normed.grad
        d = a.shape[-1]
        gx = inv / d * (d * g - g.sum(axis=-1, keepdims=True) - xhat * (g * xhat).sum(axis=-1, keepdims=True))
        _acc(a, gx)

    normed = _make(xhat, (a,), _bw)
    out = normed
    if gamma is not None:
        out = mul(out, gamma)
    if beta is not None:
        out = add(out, beta)
    return out


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    # tanh approximation
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    inner = _GELU_C * x * (1.0 + 0.044715 * x2)
    t = np.tanh(inner)
    out = None

    def _bw():
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        _acc(a, out.grad * d)

    out = _make(0.5 * x * (1.0 + t), (a,), _bw)
    return out


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    out = None

    def _bw():
        _acc(a, out.grad * mask)

    out = _make(a.data * mask, (a,), _bw)
    return out


def embedding(table, indices) -> Tensor:
    table = as_tensor(table)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError("embedding index out of range")
    out = None

    def _bw():
        g = np.zeros_like(table.data)
        np.add.at(g, idx, out.grad)
        _acc(table, g)

    out = _make(table.data[idx], (table,), _bw)
    return out


def bce_with_logits(logits, targets, weights=None) -> Tensor:
    """Mean over the batch of w_i * BCE(sigmoid(z_i), y_i)."""
    logits = as_tensor(logits)
    z = logits.data
    y = np.asarray(targets, dtype=np.float64)
    w = np.ones_like(z) if weights is None else np.broadcast_to(np.asarray(weights, dtype=np.float64), z.shape)
    # log(1 + exp(-|z|)) form is stable on both tails
    per = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    n = z.size
    out = None

    def _bw():
        p = 0.5 * (1.0 + np.tanh(0.5 * z))
        _acc(logits, out.grad * w * (p - y) / n)

    out = _make(np.sum(w * per) / n, (logits,), _bw)
    return out


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    return 0.5 * (1.0 + np.tanh(0.5 * z))


# ---------------------------------------------------------------- backward


def _topo(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] | None = None, retain_graph: bool = False) -> list[np.ndarray] | None:
    """Populate ``.grad`` on every tensor reachable from a scalar loss.

    When ``params`` is given, their grads are reset first and returned in
    order; parameters off the computation path get zeros. Unless
    ``retain_graph`` is set, the graph is dismantled afterwards: each op's
    closure refers back to its output, and those cycles would otherwise keep
    every intermediate array alive until the cyclic collector runs.
    """
    if loss.data.size != 1:
        raise ValueError("backward needs a scalar loss")
    params = list(params) if params is not None else None
    if params is not None:
        for p in params:
            p.grad = None
    order = _topo(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward()
    if not retain_graph:
        for node in order:
            if node._backward is not None:
                node._backward = None
                node._parents = ()
    if params is None:
        return None
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]


def grad(fn: Callable[[], Tensor], params: Sequence[Tensor]) -> list[np.ndarray]:
    return backward(fn(), params)


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamW:
    """AdamW with decoupled weight decay (decay uses the pre-step value)."""

    lr: float = 5e-5
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def step(self, params: Sequence[Tensor], grads: Sequence[np.ndarray]) -> None:
        if not self.m:
            self.m = [np.zeros_like(p.data) for p in params]
            self.v = [np.zeros_like(p.data) for p in params]
        if len(params) != len(self.m):
            raise ValueError("parameter list changed between steps")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            if g.shape != p.data.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data * (1.0 - self.lr * self.weight_decay)
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adamw_step(state: AdamW, params: Sequence[Tensor], grads: Sequence[np.ndarray]) -> None:
    state.step(params, grads)


@dataclass(frozen=True)
class LrSchedule:
    """Cosine annealing with warm restarts, stepped per epoch."""

    eta_max: float
    eta_min: float = 0.0
    T0: float = 10
    T_mult: float = 2

    def __post_init__(self):
        if self.eta_min > self.eta_max:
            raise ValueError("eta_min must not exceed eta_max")
        if self.T0 < 1 or self.T_mult < 1:
            raise ValueError("T0 and T_mult must be >= 1")

    def lr_at(self, epoch: float) -> float:
        if epoch < 0:
            raise ValueError("epoch must be >= 0")
        start, length = 0.0, float(self.T0)
        while epoch >= start + length:
            start += length
            length *= self.T_mult
        t_cur = epoch - start
        return self.eta_min + 0.5 * (self.eta_max - self.eta_min) * (1.0 + math.cos(math.pi * t_cur / length))


def lr_at(schedule: LrSchedule, epoch: float) -> float:
    return schedule.lr_at(epoch)


def clip_global_norm(grads: Sequence[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    """Rescale so the joint L2 norm is at most ``max_norm``; returns (grads, pre-clip norm)."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if norm > max_norm:
        scale = max_norm / norm
        return [g * scale for g in grads], norm
    return [np.array(g, copy=True) for g in grads], norm


# ---------------------------------------------------------------- serialization


def save_weights(directory, named: dict[str, np.ndarray], meta: dict | None = None, dtype: str = "<f4") -> Path:
    """Write a versioned JSON manifest plus one little-endian blob per parameter."""
    directory = Path(directory)
    (directory / "weights").mkdir(parents=True, exist_ok=True)
    entries = []
    for name, value in named.items():
        arr = np.asarray(value, dtype=np.float64)
        fname = f"weights/{name}.bin"
        (directory / fname).write_bytes(arr.astype(dtype).tobytes(order="C"))
        entries.append({"name": name, "shape": list(arr.shape), "file": fname})
    manifest = {"format_version": WEIGHTS_FORMAT_VERSION, "dtype": dtype, "params": entries}
    if meta:
        manifest["meta"] = meta
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_weights(directory) -> tuple[dict[str, np.ndarray], dict]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("format_version") != WEIGHTS_FORMAT_VERSION:
        raise ValueError(f"unsupported weights format {manifest.get('format_version')!r}")
    dtype = np.dtype(manifest["dtype"])
    named = {}
    for entry in manifest["params"]:
        raw = np.frombuffer((directory / entry["file"]).read_bytes(), dtype=dtype)
        named[entry["name"]] = raw.astype(np.float64).reshape(entry["shape"])
    return named, manifest
