"""Dense tensors with reverse-mode automatic differentiation.

Just enough machinery to train the two toy transformers and the latent
projector: matmul, elementwise arithmetic with broadcasting, reductions,
indexing, layer norm, softmax, exact-erf GELU and a masked cross-entropy.

Each op records its parents and a closure mapping the output gradient to
parent gradients. ``Tensor.backward`` walks the graph in reverse
topological order and accumulates into the ``grad`` of leaf tensors, so
calling it twice on the same graph doubles every leaf gradient.

Values default to float32. Ops keep numpy's dtype promotion, which lets
the gradient checker re-run a function in float64 without special cases.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ConfigError, DegenerateLossError, DimensionError

DEFAULT_DTYPE = np.float32
CHECK_FINITE = True
_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Build no graph inside the block (inference). Per-thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


_SQRT_HALF = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        if CHECK_FINITE and not np.isfinite(data).all():
            raise FloatingPointError(f"non-finite values produced by {op}")
        t = cls.__new__(cls)
        t.data = data
        t.grad = None
        t.op = op
        t.requires_grad = grad_enabled() and any(p.requires_grad for p in parents)
        if t.requires_grad:
            t._parents = tuple(parents)
            t._backward = backward
        else:
            t._parents = ()
            t._backward = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    # -- autodiff --------------------------------------------------------------

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() without a seed gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                k = id(p)
                grads[k] = grads[k] + pg if k in grads else pg

    # -- operators -------------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _t(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, np.ndarray) and np.issubdtype(x.dtype, np.floating):
        return Tensor(x, dtype=x.dtype)
    dtype = like.dtype if like is not None else DEFAULT_DTYPE
    return Tensor(x, dtype=dtype)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise -----------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _t(a, b if isinstance(b, Tensor) else None)
    b = _t(b, a)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a = _t(a, b if isinstance(b, Tensor) else None)
    b = _t(b, a)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a = _t(a, b if isinstance(b, Tensor) else None)
    b = _t(b, a)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a = _t(a, b if isinstance(b, Tensor) else None)
    b = _t(b, a)

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(a.data / b.data, (a, b), backward, "div")


def gelu(x: Tensor) -> Tensor:
    """x * Phi(x) using the exact normal CDF."""
    x = _t(x)
    cdf = 0.5 * (1.0 + erf(x.data * _SQRT_HALF))
    cdf = cdf.astype(x.dtype, copy=False)

    def backward(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        return (g * (cdf + x.data * pdf),)

    return Tensor._from_op(x.data * cdf, (x,), backward, "gelu")


# -- linear algebra ---------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return Tensor._from_op(a.data @ b.data, (a, b), backward, "matmul")


# -- shape ops --------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape

    def backward(g):
        return (g.reshape(src),)

    return Tensor._from_op(x.data.reshape(shape), (x,), backward, "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inv),)

    return Tensor._from_op(x.data.transpose(axes), (x,), backward, "transpose")


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, slice, type(None), type(Ellipsis))) for p in parts)


def getitem(x: Tensor, idx) -> Tensor:
    basic = _is_basic_index(idx)

    def backward(g):
        full = np.zeros_like(x.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return Tensor._from_op(np.array(x.data[idx]), (x,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_t(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return Tensor._from_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def take_rows(weight: Tensor, ids) -> Tensor:
    """Embedding lookup: ``weight[ids]`` for an integer id array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    n_rows = weight.shape[0]

    def backward(g):
        flat = g.reshape(-1, weight.shape[1])
        full = np.zeros_like(weight.data)
        np.add.at(full, ids.reshape(-1), flat)
        return (full,)

    if ids.size and (ids.min() < 0 or ids.max() >= n_rows):
        raise DimensionError(f"row id out of range for table with {n_rows} rows")
    return Tensor._from_op(weight.data[ids], (weight,), backward, "take_rows")


# -- reductions -------------------------------------------------------------------


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._from_op(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axis, keepdims), 1.0 / n)


# -- normalisation / probabilities ------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(y, (x,), backward, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = rstd * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        gg = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gb = g.sum(axis=lead) if beta.requires_grad else None
        return gx, gg, gb

    return Tensor._from_op(xhat * gamma.data + beta.data, (x, gamma, beta), backward, "layer_norm")


def log_softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, targets, mask, weights=None, denom: float | None = None) -> Tensor:
    """Masked mean negative log-likelihood.

    ``logits`` has shape (..., V); ``targets`` and ``mask`` match its leading
    shape. Optional per-position ``weights`` scale each term, and ``denom``
    replaces the default normaliser (the number of masked-in positions).
    """
    V = logits.shape[-1]
    flat = logits.data.reshape(-1, V)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    if targets.shape[0] != flat.shape[0] or mask.shape[0] != flat.shape[0]:
        raise DimensionError(f"targets {targets.shape} / mask {mask.shape} do not match logits {logits.shape}")
    if not mask.any():
        raise DegenerateLossError("cross-entropy mask selects no positions")
    if targets[mask].min() < 0 or targets[mask].max() >= V:
        raise DimensionError(f"target id out of range for vocabulary of size {V}")
    w = mask.astype(flat.dtype)
    if weights is not None:
        w = w * np.asarray(weights, dtype=flat.dtype).reshape(-1)
    n = float(mask.sum()) if denom is None else float(denom)

    logp = log_softmax_np(flat)
    rows = np.arange(flat.shape[0])
    safe_t = np.where(mask, targets, 0)
    nll = -logp[rows, safe_t]
    loss = np.asarray((w * nll).sum() / n, dtype=flat.dtype)

    def backward(g):
        p = np.exp(logp)
        p[rows, safe_t] -= 1.0
        p *= (w / n)[:, None]
        return ((g * p).reshape(logits.shape),)

    return Tensor._from_op(loss, (logits,), backward, "softmax_cross_entropy")


# -- optimisation -----------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_init(params: Sequence[Tensor]) -> AdamState:
    return AdamState(0, [np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray | None],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> AdamState:
    """One bias-corrected Adam update, applied by rebinding ``p.data``.

    A missing gradient counts as zero.
    """
    if not lr > 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    if len(state.m) != len(params):
        raise ConfigError("optimizer state does not match parameter list")
    b1, b2 = betas
    state.step += 1
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * (g * g)
        update = lr * (state.m[i] / bc1) / (np.sqrt(state.v[i] / bc2) + eps)
        p.data = (p.data - update).astype(p.data.dtype, copy=False)
    return state


def clip_by_global_norm(grads: Sequence[np.ndarray | None], max_norm: float) -> tuple[list, float]:
    """Scale gradients so their joint L2 norm is at most ``max_norm``; returns (grads, norm before)."""
    norm = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads if g is not None)))
    if norm <= max_norm or norm == 0.0:
        return list(grads), norm
    scale = max_norm / norm
    return [None if g is None else (g * scale).astype(g.dtype, copy=False) for g in grads], norm


def warmup_cosine(step: int, total: int, warmup: int, floor: float = 0.1) -> float:
    """Learning-rate multiplier: linear warmup, then cosine decay to ``floor``."""
    if warmup > 0 and step < warmup:
        return (step + 1) / warmup
    if total <= warmup:
        return 1.0
    frac = min(1.0, (step - warmup) / (total - warmup))
    return floor + (1.0 - floor) * 0.5 * (1.0 + np.cos(np.pi * frac))


# -- gradient checking ------------------------------------------------------------


def relative_error(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))


def numeric_gradient(
    fn: Callable[[list[Tensor]], Tensor],
    arrays: Sequence[np.ndarray],
    which: int,
    h: float = 1e-3,
    coords: Iterable[tuple[int, ...]] | None = None,
) -> dict[tuple[int, ...], float]:
    """Central differences of ``fn`` w.r.t. ``arrays[which]``, evaluated in float64."""
    base = [np.array(a, dtype=np.float64) for a in arrays]
    target = base[which]
    if coords is None:
        coords = list(np.ndindex(target.shape))
    out = {}
    for c in coords:
        orig = target[c]
        target[c] = orig + h
        fp = fn([Tensor(a, dtype=np.float64) for a in base]).item()
        target[c] = orig - h
        fm = fn([Tensor(a, dtype=np.float64) for a in base]).item()
        target[c] = orig
        out[tuple(c)] = (fp - fm) / (2.0 * h)
    return out


def check_gradients(
    fn: Callable[[list[Tensor]], Tensor],
    arrays: Sequence[np.ndarray],
    h: float = 1e-3,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between float32 backprop and float64 central differences."""
    inputs = [Tensor(a, requires_grad=True) for a in arrays]
    fn(inputs).backward()
    worst = 0.0
    for i, t in enumerate(inputs):
        coords = list(np.ndindex(t.shape))
        if max_coords is not None and len(coords) > max_coords:
            rng = rng or np.random.default_rng(0)
            pick = rng.choice(len(coords), size=max_coords, replace=False)
            coords = [coords[j] for j in pick]
        num = numeric_gradient(fn, arrays, i, h, coords)
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        for c, v in num.items():
            worst = max(worst, float(relative_error(analytic[c], v)))
    return worst
