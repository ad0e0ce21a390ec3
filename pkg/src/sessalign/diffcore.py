"""Minimal reverse-mode automatic differentiation over NumPy arrays.

Every op takes :class:`Tensor` inputs, computes its forward value eagerly and
records a closure that pushes the output gradient back onto its parents.
:func:`backward` walks the recorded graph in reverse topological order.

All arithmetic is float64.
"""
from __future__ import annotations

import hashlib
import json
import math
from collections import OrderedDict
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Incompatible operand shapes for a primitive."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        desc = ", ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {desc}")


class NumericalError(FloatingPointError):
    """Non-finite value encountered where a finite one is required."""


class Tensor:
    __slots__ = ("data", "grad", "parents", "backward_fn", "requires_grad", "name")

    def __init__(self, data, parents=(), backward_fn=None, requires_grad=None, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self.parents)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def const(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, requires_grad=False)


def leaf(x, name=None) -> Tensor:
    """A differentiable input that is not a stored parameter."""
    return Tensor(np.array(x, dtype=np.float64), requires_grad=True, name=name)


def _acc(t: Tensor, g) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _node(data, parents, fn) -> Tensor:
    out = Tensor(data, parents)
    if out.requires_grad:
        out.backward_fn = fn
    return out


def backward(root: Tensor, seed=1.0) -> None:
    """Accumulate d(seed * root)/d(leaf) into every reachable ``.grad``."""
    order = []
    seen = set()
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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    _acc(root, np.broadcast_to(np.asarray(seed, dtype=np.float64), root.shape))
    for node in reversed(order):
        if node.backward_fn is not None and node.grad is not None:
            node.backward_fn(node.grad)


# ---------------------------------------------------------------- elementwise

def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def add(a, b) -> Tensor:
    a, b = const(a), const(b)
    _broadcast_shape("add", a, b)

    def fn(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(g, b.shape))

    return _node(a.data + b.data, (a, b), fn)


def sub(a, b) -> Tensor:
    a, b = const(a), const(b)
    _broadcast_shape("sub", a, b)

    def fn(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(-g, b.shape))

    return _node(a.data - b.data, (a, b), fn)


def mul(a, b) -> Tensor:
    a, b = const(a), const(b)
    _broadcast_shape("mul", a, b)

    def fn(g):
        _acc(a, _unbroadcast(g * b.data, a.shape))
        _acc(b, _unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, (a, b), fn)


def scale(a: Tensor, c: float) -> Tensor:
    def fn(g):
        _acc(a, g * c)

    return _node(a.data * c, (a,), fn)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def fn(g):
        _acc(x, g * mask)

    return _node(np.where(mask, x.data, 0.0), (x,), fn)


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)

    def fn(g):
        _acc(x, g * y * (1.0 - y))

    return _node(y, (x,), fn)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def fn(g):
        _acc(x, g * (1.0 - y * y))

    return _node(y, (x,), fn)


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout; identity when not training or ``p == 0``."""
    if not train or p <= 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)

    def fn(g):
        _acc(x, g * keep)

    return _node(x.data * keep, (x,), fn)


# ------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = const(a), const(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    out = np.matmul(a.data, b.data)

    def fn(g):
        if b.ndim == 2:
            if a.requires_grad:
                _acc(a, g @ b.data.T)
            if b.requires_grad:
                k = a.shape[-1]
                _acc(b, a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1]))
            return
        if a.requires_grad:
            _acc(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _node(out, (a, b), fn)


def affine(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """``x @ W + b`` over the last axis of ``x``."""
    x = const(x)
    if W.ndim != 2 or x.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ShapeError("affine", x.shape, W.shape, b.shape)
    out = x.data @ W.data + b.data

    def fn(g):
        g2 = g.reshape(-1, g.shape[-1])
        if x.requires_grad:
            _acc(x, g @ W.data.T)
        if W.requires_grad:
            _acc(W, x.data.reshape(-1, x.shape[-1]).T @ g2)
        if b.requires_grad:
            _acc(b, g2.sum(axis=0))

    return _node(out, (x, W, b), fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if gamma.shape != (x.shape[-1],) or beta.shape != gamma.shape:
        raise ShapeError("layer_norm", x.shape, gamma.shape, beta.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    n = x.shape[-1]

    def fn(g):
        if gamma.requires_grad:
            _acc(gamma, (g * xhat).reshape(-1, n).sum(axis=0))
        if beta.requires_grad:
            _acc(beta, g.reshape(-1, n).sum(axis=0))
        if x.requires_grad:
            gh = g * gamma.data
            _acc(x, inv * (gh - gh.mean(axis=-1, keepdims=True)
                           - xhat * (gh * xhat).mean(axis=-1, keepdims=True)))

    return _node(xhat * gamma.data + beta.data, (x, gamma, beta), fn)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    z = x.data - m
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def fn(g):
        _acc(x, g - p * g.sum(axis=axis, keepdims=True))

    return _node(y, (x,), fn)


def softmax(x: Tensor, axis: int = -1, mask=None) -> Tensor:
    """Softmax along ``axis``; entries where ``mask`` is False get probability 0."""
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    m = z.max(axis=axis, keepdims=True)
    e = np.exp(z - m)
    y = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        _acc(x, y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _node(y, (x,), fn)


# ------------------------------------------------------------------- reshaping

def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, shape) from None

    def fn(g):
        _acc(x, g.reshape(x.shape))

    return _node(out, (x,), fn)


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)

    def fn(g):
        _acc(x, np.transpose(g, inv))

    return _node(np.transpose(x.data, axes), (x,), fn)


def take(x: Tensor, idx) -> Tensor:
    """Rows ``idx`` of ``x`` along axis 0."""
    idx = np.asarray(idx, dtype=np.int64)

    def fn(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        _acc(x, full)

    return _node(x.data[idx], (x,), fn)


def select(x: Tensor, i: int, axis: int = 1) -> Tensor:
    """Slice index ``i`` out of ``axis`` (dropping that axis)."""
    sl = [slice(None)] * x.ndim
    sl[axis] = i
    sl = tuple(sl)

    def fn(g):
        full = np.zeros_like(x.data)
        full[sl] = g
        _acc(x, full)

    return _node(x.data[sl], (x,), fn)


def stack(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    shapes = {t.shape for t in xs}
    if len(shapes) != 1:
        raise ShapeError("stack", *shapes)

    def fn(g):
        for i, t in enumerate(xs):
            _acc(t, np.take(g, i, axis=axis))

    return _node(np.stack([t.data for t in xs], axis=axis), tuple(xs), fn)


def patchify(x: Tensor, p: int) -> Tensor:
    """(B, T, c) -> (B, ceil(T/p), p*c): non-overlapping patches, last zero-padded."""
    if x.ndim != 3 or p < 1:
        raise ShapeError("patchify", x.shape, (p,))
    B, T, c = x.shape
    n = -(-T // p)
    padded = np.zeros((B, n * p, c))
    padded[:, :T] = x.data

    def fn(g):
        _acc(x, g.reshape(B, n * p, c)[:, :T])

    return _node(padded.reshape(B, n, p * c), (x,), fn)


# ------------------------------------------------------------------ reductions

def sum_all(x: Tensor) -> Tensor:
    def fn(g):
        _acc(x, np.broadcast_to(g, x.shape))

    return _node(x.data.sum(), (x,), fn)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size

    def fn(g):
        _acc(x, np.broadcast_to(g / n, x.shape))

    return _node(x.data.mean(), (x,), fn)


def mean_pool(x: Tensor, mask=None) -> Tensor:
    """Mean over axis 1 restricted to ``mask`` (B, P) positions."""
    if mask is None:
        mask = np.ones(x.shape[:2], dtype=bool)
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != x.shape[:2]:
        raise ShapeError("mean_pool", x.shape, mask.shape)
    counts = mask.sum(axis=1)
    if np.any(counts == 0):
        raise ValueError("mean_pool: a row has no valid positions")
    w = mask / counts[:, None]
    w = w.reshape(w.shape + (1,) * (x.ndim - 2))

    def fn(g):
        _acc(x, np.expand_dims(g, 1) * w)

    return _node((x.data * w).sum(axis=1), (x,), fn)


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy of ``logits`` against 0/1 ``targets``."""
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != logits.shape:
        raise ShapeError("bce_with_logits", logits.shape, t.shape)
    z = logits.data
    # log(1 + exp(-|z|)) + max(z, 0) - z t
    per = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    n = z.size

    def fn(g):
        _acc(logits, g * (_sigmoid(z) - t) / n)

    return _node(per.mean(), (logits,), fn)


# ------------------------------------------------------------------- recurrent

def gru_cell(x: Tensor, h: Tensor, Wx: Tensor, Wh: Tensor, bx: Tensor, bh: Tensor) -> Tensor:
    """Gated recurrent update for a batch: x (B, I), h (B, H) -> h' (B, H).

    Gate order in the 3H axis is (reset, update, candidate).
    """
    H = h.shape[-1]
    if Wx.shape != (x.shape[-1], 3 * H) or Wh.shape != (H, 3 * H) \
            or bx.shape != (3 * H,) or bh.shape != (3 * H,):
        raise ShapeError("gru_cell", x.shape, h.shape, Wx.shape, Wh.shape)
    gx = x.data @ Wx.data + bx.data
    gh = h.data @ Wh.data + bh.data
    r = _sigmoid(gx[:, :H] + gh[:, :H])
    z = _sigmoid(gx[:, H:2 * H] + gh[:, H:2 * H])
    hn = gh[:, 2 * H:]
    n = np.tanh(gx[:, 2 * H:] + r * hn)
    out = (1.0 - z) * n + z * h.data

    def fn(g):
        dn = g * (1.0 - z)
        dz = g * (h.data - n)
        dan = dn * (1.0 - n * n)
        dr = dan * hn
        dar = dr * r * (1.0 - r)
        daz = dz * z * (1.0 - z)
        dgx = np.concatenate([dar, daz, dan], axis=1)
        dgh = np.concatenate([dar, daz, dan * r], axis=1)
        _acc(x, dgx @ Wx.data.T)
        _acc(h, g * z + dgh @ Wh.data.T)
        _acc(Wx, x.data.T @ dgx)
        _acc(Wh, h.data.T @ dgh)
        _acc(bx, dgx.sum(axis=0))
        _acc(bh, dgh.sum(axis=0))

    return _node(out, (x, h, Wx, Wh, bx, bh), fn)


# ---------------------------------------------------------- gradient reversal

def grl(x: Tensor, alpha: float, lam: float) -> Tensor:
    """Identity forward; backward multiplies the incoming gradient by -alpha*lam."""
    factor = -float(alpha) * float(lam)

    def fn(g):
        _acc(x, g * factor)

    return _node(x.data, (x,), fn)


# ------------------------------------------------------------- parameter store

class ParamStore:
    """Named float64 parameters with gradient buffers and a flat index space."""

    def __init__(self):
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()

    def add(self, name: str, value) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        t.grad = np.zeros_like(t.data)
        self.params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params.values())

    def __len__(self):
        return len(self.params)

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self.params if n.startswith(prefix)]

    def zero_grad(self):
        for t in self.params.values():
            if t.grad is None or t.grad.shape != t.data.shape:
                t.grad = np.zeros_like(t.data)
            else:
                t.grad.fill(0.0)

    @property
    def size(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def _locate(self, i: int):
        for t in self.params.values():
            if i < t.data.size:
                return t, i
            i -= t.data.size
        raise IndexError("flat index out of range")

    def get_flat(self, i: int) -> float:
        t, j = self._locate(i)
        return float(t.data.flat[j])

    def set_flat(self, i: int, v: float):
        t, j = self._locate(i)
        t.data.flat[j] = v

    def grad_flat(self, i: int) -> float:
        t, j = self._locate(i)
        return float(t.grad.flat[j])

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.params.items()}

    def grads(self) -> dict[str, np.ndarray]:
        return {n: t.grad.copy() for n, t in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]):
        for n, t in self.params.items():
            v = np.asarray(state[n], dtype=np.float64)
            if v.shape != t.data.shape:
                raise ShapeError(f"load_state[{n}]", t.data.shape, v.shape)
            t.data[...] = v


# ------------------------------------------------------------------ optimizer

class AdamW:
    """Adam with decoupled weight decay over a fixed list of parameters."""

    def __init__(self, params: Iterable[Tensor], lr=1e-3, betas=(0.9, 0.999),
                 eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float | None = None, grad_scale: float = 1.0):
        lr = self.lr if lr is None else lr
        for p in self.params:
            if not np.all(np.isfinite(p.grad)):
                bad = int((~np.isfinite(p.grad)).sum())
                raise NumericalError(
                    f"non-finite gradient in {p.name!r}: {bad} entries at optimizer step {self.t + 1}")
        self.t += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad * grad_scale if grad_scale != 1.0 else p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            p.data -= (lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)

    def state_dict(self):
        return {"t": self.t, "m": [a.copy() for a in self.m], "v": [a.copy() for a in self.v]}

    def load_state_dict(self, state):
        self.t = state["t"]
        self.m = [a.copy() for a in state["m"]]
        self.v = [a.copy() for a in state["v"]]


class SGD:
    """Plain gradient descent; same ``step``/state interface as :class:`AdamW`."""

    def __init__(self, params: Iterable[Tensor], lr=1e-2):
        self.params = list(params)
        self.lr = lr
        self.t = 0

    def step(self, lr: float | None = None, grad_scale: float = 1.0):
        lr = self.lr if lr is None else lr
        for p in self.params:
            if not np.all(np.isfinite(p.grad)):
                raise NumericalError(f"non-finite gradient in {p.name!r} at optimizer step {self.t + 1}")
        self.t += 1
        for p in self.params:
            p.data -= lr * grad_scale * p.grad

    def state_dict(self):
        return {"t": self.t}

    def load_state_dict(self, state):
        self.t = state["t"]


def adamw_step(params, opt: AdamW, lr: float):
    """Functional alias: one AdamW update of ``params`` (must be ``opt.params``)."""
    if list(params) != opt.params:
        raise ValueError("adamw_step: params do not match optimizer state")
    opt.step(lr)


def multistep_lr(base_lr: float, epoch: int, milestones: Sequence[int], gamma: float) -> float:
    passed = sum(1 for m in milestones if m <= epoch)
    return base_lr * gamma ** passed


# ------------------------------------------------------- finite differences

def finite_diff_check(loss_fn: Callable[[], Tensor], store: ParamStore, eps: float = 1e-4,
                      n_probes: int = 64, rng: np.random.Generator | None = None,
                      names: Sequence[str] | None = None,
                      grad_fn: Callable[[], None] | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` must rebuild the graph and return a scalar tensor.  The
    analytic gradient comes from ``backward(loss_fn())`` unless ``grad_fn`` is
    given, in which case it must fill the ``.grad`` buffers itself.
    Coordinates are drawn uniformly over ``names`` (default: all parameters).
    """
    if not eps > 0:
        raise ValueError("finite_diff_check: eps must be positive")
    rng = np.random.default_rng(0) if rng is None else rng
    f0 = loss_fn().item()
    f1 = loss_fn().item()
    if f0 != f1 and not (math.isnan(f0) and math.isnan(f1)):
        raise RuntimeError(f"loss_fn is not deterministic: {f0!r} != {f1!r}")

    store.zero_grad()
    if grad_fn is None:
        backward(loss_fn())
    else:
        grad_fn()

    names = list(store.params) if names is None else list(names)
    offsets = []
    start = 0
    selected = []
    for n, t in store.params.items():
        if n in names:
            selected.append((start, t.data.size))
        start += t.data.size
    total = sum(s for _, s in selected)
    if total == 0:
        raise ValueError("finite_diff_check: no coordinates to probe")
    picks = rng.choice(total, size=min(n_probes, total), replace=False)
    for k in picks:
        for base, size in selected:
            if k < size:
                offsets.append(base + k)
                break
            k -= size

    worst = 0.0
    for i in offsets:
        analytic = store.grad_flat(i)
        w = store.get_flat(i)
        store.set_flat(i, w + eps)
        fp = loss_fn().item()
        store.set_flat(i, w - eps)
        fm = loss_fn().item()
        store.set_flat(i, w)
        numeric = (fp - fm) / (2.0 * eps)
        rel = abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))
        worst = max(worst, rel)
    return worst


# ------------------------------------------------------------------ checkpoints

CKPT_FORMAT = "sessalign-ckpt/1"


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(path, store: ParamStore, *, config: dict | None = None,
                    step: int = 0, meta: dict | None = None) -> None:
    doc = {
        "format": CKPT_FORMAT,
        "config_hash": config_hash(config or {}),
        "schedule_step": int(step),
        "meta": meta or {},
        "params": [
            {"name": n, "shape": list(t.data.shape), "dtype": "float64",
             "values": t.data.ravel(order="C").tolist()}
            for n, t in store.params.items()
        ],
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path) -> dict:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CKPT_FORMAT:
        raise ValueError(f"{path}: not a {CKPT_FORMAT} file")
    state = OrderedDict()
    for rec in doc["params"]:
        if rec["dtype"] != "float64":
            raise ValueError(f"{path}: unsupported dtype {rec['dtype']!r}")
        state[rec["name"]] = np.asarray(rec["values"], dtype=np.float64).reshape(rec["shape"])
    doc["state"] = state
    return doc
