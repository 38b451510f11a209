"""Minimal reverse-mode differentiation on top of numpy.

Every value is a float64 :class:`Tensor`. Operations record their parents and
a backward closure; :meth:`Tensor.backward` replays the recorded graph in
reverse topological order, accumulating gradients additively.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

CHECKPOINT_FORMAT = "idmlab-checkpoint"
CHECKPOINT_VERSION = 1


class DimensionError(ValueError):
    pass


class TrainingError(RuntimeError):
    def __init__(self, message: str, param: str | None = None):
        super().__init__(message)
        self.param = param


class Tensor:
    __array_priority__ = 100

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed gradient needs a scalar")
            grad = np.ones_like(self.data)
        tape = build_tape(self)
        self._accumulate(np.asarray(grad, dtype=np.float64).reshape(self.shape))
        for node in reversed(tape):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def build_tape(root: Tensor) -> list[Tensor]:
    """Topologically ordered list of every node that ``root`` depends on."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# elementwise and structural ops ------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: a._accumulate(-g))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not conform")
    return _result(a.data @ b.data, (a, b), backward)


def tsum(a: Tensor, axis=None) -> Tensor:
    def backward(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape))
        else:
            a._accumulate(np.broadcast_to(np.expand_dims(g, axis), a.shape))

    return _result(np.asarray(a.data.sum(axis=axis)), (a,), backward)


def tmean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis), 1.0 / n)


def square(a: Tensor) -> Tensor:
    return _result(a.data**2, (a,), lambda g: a._accumulate(2.0 * a.data * g))


def reshape(a: Tensor, shape) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: a._accumulate(g.reshape(a.shape)))


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.shape[0], -1))


def concat(tensors: list[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, part in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accumulate(part)

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def take_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """``table[index]`` with scatter-add backward."""
    index = np.asarray(index, dtype=np.int64)

    def backward(g):
        acc = np.zeros_like(table.data)
        np.add.at(acc, index, g)
        table._accumulate(acc)

    return _result(table.data[index], (table,), backward)


def straight_through(z: Tensor, replacement: np.ndarray) -> Tensor:
    """Forward yields ``replacement``; the gradient flows to ``z`` unchanged."""
    replacement = np.asarray(replacement, dtype=np.float64)
    if replacement.shape != z.shape:
        raise DimensionError("straight-through replacement must match the input shape")
    return _result(replacement.copy(), (z,), lambda g: z._accumulate(g))


# network layers -------------------------------------------------------------

def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map ``x @ W.T + b`` with ``W`` stored as [out, in]."""
    if x.data.ndim != 2 or W.data.ndim != 2 or x.shape[1] != W.shape[1]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {W.shape}")
    if b is not None and b.shape != (W.shape[0],):
        raise DimensionError(f"linear: bias {b.shape} does not match weight {W.shape}")
    out = x.data @ W.data.T
    if b is not None:
        out = out + b.data

    def backward(g):
        if x.requires_grad:
            x._accumulate(g @ W.data)
        if W.requires_grad:
            W._accumulate(g.T @ x.data)
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=0))

    parents = (x, W) if b is None else (x, W, b)
    return _result(out, parents, backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(x.data * mask, (x,), lambda g: x._accumulate(g * mask))


def conv_output_size(size: int, k: int, padding: int, stride: int) -> int:
    span = size + 2 * padding - k
    if span < 0 or span % stride:
        raise DimensionError(
            f"conv2d: (size {size} + 2*{padding} - {k}) is not divisible by stride {stride}"
        )
    return span // stride + 1


def conv2d(x: Tensor, K: Tensor, b: Tensor | None = None, padding: int = 0, stride: int = 1) -> Tensor:
    """Cross-correlation of [B,C,H,W] inputs with [F,C,kh,kw] kernels."""
    if x.data.ndim != 4 or K.data.ndim != 4 or x.shape[1] != K.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} does not match kernel {K.shape}")
    B, C, H, W = x.shape
    F, _, kh, kw = K.shape
    Ho = conv_output_size(H, kh, padding, stride)
    Wo = conv_output_size(W, kw, padding, stride)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    # [B, C, Ho, Wo, kh, kw] -> rows of patches
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    kmat = K.data.reshape(F, -1)
    out = cols @ kmat.T
    if b is not None:
        out = out + b.data
    out = out.reshape(B, Ho, Wo, F).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, F)
        if K.requires_grad:
            K._accumulate((g2.T @ cols).reshape(K.shape))
        if b is not None and b.requires_grad:
            b._accumulate(g2.sum(axis=0))
        if x.requires_grad:
            dcols = (g2 @ kmat).reshape(B, Ho, Wo, C, kh, kw)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += (
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            x._accumulate(dxp[:, :, padding:padding + H, padding:padding + W])

    parents = (x, K) if b is None else (x, K, b)
    return _result(np.ascontiguousarray(out), parents, backward)


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2, odd trailing rows/columns dropped.

    Ties go to the lowest flat index inside each window.
    """
    B, C, H, W = x.shape
    Ho, Wo = H // 2, W // 2
    if Ho == 0 or Wo == 0:
        raise DimensionError(f"maxpool2x2: input {x.shape} too small")
    crop = x.data[:, :, :2 * Ho, :2 * Wo]
    blocks = crop.reshape(B, C, Ho, 2, Wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho, Wo, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros((B, C, Ho, Wo, 4))
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = np.zeros_like(x.data)
        gx[:, :, :2 * Ho, :2 * Wo] = (
            gb.reshape(B, C, Ho, Wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, 2 * Ho, 2 * Wo)
        )
        x._accumulate(gx)

    return _result(out, (x,), backward)


def global_max_pool(x: Tensor) -> Tensor:
    """Maximum over all pixels: [B,C,H,W] -> [B,C]; ties go to the first pixel."""
    B, C, H, W = x.shape
    flat = x.data.reshape(B, C, H * W)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gf = np.zeros_like(flat)
        np.put_along_axis(gf, idx[..., None], g[..., None], axis=-1)
        x._accumulate(gf.reshape(x.shape))

    return _result(out, (x,), backward)


def _log_softmax_np(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def log_softmax(x: Tensor) -> Tensor:
    out = _log_softmax_np(x.data)
    p = np.exp(out)
    return _result(out, (x,), lambda g: x._accumulate(g - p * g.sum(axis=-1, keepdims=True)))


def softmax(x: Tensor) -> Tensor:
    p = np.exp(_log_softmax_np(x.data))

    def backward(g):
        x._accumulate(p * (g - (g * p).sum(axis=-1, keepdims=True)))

    return _result(p, (x,), backward)


def cross_entropy_loss(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"cross_entropy_loss: {labels.shape} labels for {n} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise IndexError(f"cross_entropy_loss: label outside [0, {k})")
    logp = _log_softmax_np(logits.data)
    loss = -logp[np.arange(n), labels].mean()

    def backward(g):
        d = np.exp(logp)
        d[np.arange(n), labels] -= 1.0
        logits._accumulate(d * (g / n))

    return _result(np.asarray(loss), (logits,), backward)


def mse_loss(pred: Tensor, target) -> Tensor:
    target = _as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mse_loss: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size

    def backward(g):
        if pred.requires_grad:
            pred._accumulate(2.0 * diff * g / n)
        if target.requires_grad:
            target._accumulate(-2.0 * diff * g / n)

    return _result(np.asarray((diff**2).mean()), (pred, target), backward)


# parameters and optimization -----------------------------------------------

def init_weight(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, name: str) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


def init_bias(shape: tuple[int, ...], name: str) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update. Returns new arrays; inputs are not modified."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}", param=name)
    step = state.step + 1
    m_new, v_new, out = {}, {}, {}
    c1 = 1.0 - state.beta1**step
    c2 = 1.0 - state.beta2**step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.first_moment.get(name, np.zeros_like(p))
        v = state.second_moment.get(name, np.zeros_like(p))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        m_new[name], v_new[name] = m, v
        out[name] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    new_state = AdamState(state.lr, state.beta1, state.beta2, state.eps, step, m_new, v_new)
    return out, new_state


class Adam:
    """Stateful wrapper around :func:`adam_step` for a dict of named Tensors."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, **kw):
        self.params = params
        self.state = AdamState(lr=lr, **kw)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        values = {k: p.data for k, p in self.params.items()}
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        new, self.state = adam_step(values, grads, self.state)
        for k, p in self.params.items():
            p.data = new[k]


# checkpoints ----------------------------------------------------------------

def save_checkpoint(path, params: dict[str, Tensor], header: dict | None = None) -> None:
    record = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "header": header or {},
        "params": [
            {"name": k, "shape": list(t.shape), "values": t.data.ravel().tolist()}
            for k, t in params.items()
        ],
    }
    Path(path).write_text(json.dumps(record))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    record = json.loads(Path(path).read_text())
    if record.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not an {CHECKPOINT_FORMAT} file")
    if record.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {record.get('version')}")
    params = {}
    for item in record["params"]:
        values = np.asarray(item["values"], dtype=np.float64)
        shape = tuple(item["shape"])
        if values.size != math.prod(shape):
            raise DimensionError(f"{path}: parameter {item['name']} has wrong value count")
        params[item["name"]] = values.reshape(shape)
    return params, record["header"]
