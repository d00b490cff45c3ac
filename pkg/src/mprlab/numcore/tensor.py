"""Dense float64 tensors with a reverse-mode tape.

Ops record themselves on the innermost active :class:`Tape` when at least one
input requires a gradient.  Outside a ``with Tape()`` block nothing is
recorded, so inference paths pay no bookkeeping cost.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from mprlab.errors import ConfigError, NumericError, UsageError

_ACTIVE_TAPES: list["Tape"] = []

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """A float64 array plus gradient bookkeeping.

    ``data`` is always a contiguous float64 ``ndarray``; ``grad`` is either
    ``None`` or an array of exactly ``data.shape``.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_leaf")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr if arr.flags.c_contiguous else arr.copy()
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._leaf = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar()

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar; the real work lives in the module-level ops
    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), mul(self, -1.0))


def _not_scalar():
    raise UsageError("item() requires a single-element tensor")


class Tape:
    """Ordered record of ops executed while the tape is active.

    Nodes are appended in execution order, which is a topological order of the
    graph.  :meth:`backward` walks them once in reverse and then clears the
    tape; a consumed tape cannot be replayed.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], BackwardFn, str]] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        """Write d(loss)/d(leaf) into ``grad`` of every recorded leaf.

        Gradients accumulate into an existing ``grad`` buffer, so callers
        zero them between steps.
        """
        if loss.size != 1:
            raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self.consumed:
            raise UsageError("tape already consumed by a previous backward()")
        if not self.nodes:
            raise UsageError("tape is empty; was the loss computed inside the tape?")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for out, inputs, fn, _name in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, fn(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if inp._leaf:
                    leaves[key] = inp
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
        for key, leaf in leaves.items():
            g = grads[key]
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        # recorded leaves that received no gradient get an explicit zero
        for _out, inputs, _fn, _name in self.nodes:
            for inp in inputs:
                if inp._leaf and inp.requires_grad and inp.grad is None:
                    inp.grad = np.zeros_like(inp.data)
        self.nodes = []
        self.consumed = True


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(name: str, data: np.ndarray, inputs: tuple[Tensor, ...], backward: BackwardFn) -> Tensor:
    if not np.isfinite(data).all():
        raise NumericError(f"non-finite output in op '{name}'")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._leaf = False
    out.requires_grad = False
    if _ACTIVE_TAPES and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _ACTIVE_TAPES[-1].nodes.append((out, inputs, backward, name))
    return out


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over the leading axes added by bias-style broadcasting."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.reshape((-1,) + g.shape[lead:]).sum(axis=0)
    kept = tuple(i for i, (n, m) in enumerate(zip(shape, g.shape)) if n == 1 and m != 1)
    return g.sum(axis=kept, keepdims=True) if kept else g


def _check_bias_shapes(name: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape:
        return
    big, small = (a, b) if a.ndim >= b.ndim else (b, a)
    if small.ndim == 0 or big.shape[big.ndim - small.ndim:] == small.shape:
        return
    # per-member bias of an ensemble: same rank, size-1 axes on the small side
    if a.ndim == b.ndim and any(all(m == n or n == 1 for m, n in zip(x.shape, y.shape))
                                for x, y in ((a, b), (b, a))):
        return
    raise ConfigError(f"{name}: shapes {a.shape} and {b.shape} do not conform")


def matmul(a: Tensor, b: Tensor, transpose_b: bool = False) -> Tensor:
    """``a @ b`` for (..., n, k) x (k, m) or matching batched operands."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ConfigError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    bd = np.swapaxes(b.data, -1, -2) if transpose_b else b.data
    shared_weight = bd.ndim == 2
    # a 2-D input fed to every member of a stacked (E, k, m) weight
    shared_input = a.ndim == 2 and bd.ndim == 3
    if not (shared_weight or shared_input) and (bd.ndim != a.ndim or bd.shape[:-2] != a.shape[:-2]):
        raise ConfigError(f"matmul batch dims differ: {a.shape} vs {b.shape}")
    if a.shape[-1] != bd.shape[-2]:
        raise ConfigError(f"matmul inner dims differ: {a.shape} vs {b.shape}")
    if shared_weight and a.ndim > 2:
        # one 2-D GEMM is faster than numpy's stacked loop
        out = (a.data.reshape(-1, a.shape[-1]) @ bd).reshape(a.shape[:-1] + (bd.shape[-1],))
    else:
        out = a.data @ bd

    def backward(g):
        ga = None
        if a.requires_grad:
            if shared_weight:
                ga = (g.reshape(-1, g.shape[-1]) @ bd.T).reshape(a.shape)
            elif shared_input:
                ga = (g @ np.swapaxes(bd, -1, -2)).sum(axis=0)
            else:
                ga = g @ np.swapaxes(bd, -1, -2)
        gb = None
        if b.requires_grad:
            if shared_weight:
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            elif shared_input:
                gb = a.data.T @ g
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
            if transpose_b:
                gb = np.swapaxes(gb, -1, -2)
        return ga, gb

    return _emit("matmul", out, (a, b), backward)


def add(a, b) -> Tensor:
    """Elementwise sum; the lower-rank operand may be a trailing-shape bias."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_bias_shapes("add", a, b)
    out = a.data + b.data

    def backward(g):
        return (
            _reduce_to(g, a.shape) if a.requires_grad else None,
            _reduce_to(g, b.shape) if b.requires_grad else None,
        )

    return _emit("add", out, (a, b), backward)


def mul(a, b) -> Tensor:
    """Elementwise product with the same conformance rule as :func:`add`."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_bias_shapes("mul", a, b)
    out = a.data * b.data

    def backward(g):
        return (
            _reduce_to(g * b.data, a.shape) if a.requires_grad else None,
            _reduce_to(g * a.data, b.shape) if b.requires_grad else None,
        )

    return _emit("mul", out, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit("relu", x.data * mask, (x,), lambda g: (g * mask,))


_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_K = 0.044715


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    t = np.tanh(_GELU_C * (xd + _GELU_K * xd * xd * xd))
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_K * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * dt),)

    return _emit("gelu", out, (x,), backward)


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _emit("tanh", t, (x,), lambda g: (g * (1.0 - t * t),))


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        e = np.exp(x.data)
    return _emit("exp", e, (x,), lambda g: (g * e,))


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return _emit("log", out, (x,), lambda g: (g / x.data,))


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", y, (x,), backward)


LAYERNORM_EPS = 1e-5


def layernorm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
              eps: float = LAYERNORM_EPS) -> Tensor:
    """Normalize the last axis; affine ``gamma``/``beta`` are (D,) or per-member (E, 1, D)."""
    d = x.shape[-1]
    if d < 2:
        raise ConfigError(f"layernorm needs last dim >= 2, got {x.shape}")
    for p in (gamma, beta):
        if p is not None and p.shape != (d,) and not (
                p.ndim == x.ndim and p.shape[-1] == d
                and all(n in (1, m) for m, n in zip(x.shape[:-1], p.shape[:-1]))):
            raise ConfigError(f"layernorm affine shape {p.shape} does not fit {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat
    if gamma is not None:
        out = out * gamma.data
    if beta is not None:
        out = out + beta.data
    inputs = tuple(t for t in (x, gamma, beta) if t is not None)

    def backward(g):
        gxhat = g * gamma.data if gamma is not None else g
        gx = None
        if x.requires_grad:
            gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                        - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        grads = [gx]
        if gamma is not None:
            grads.append(_reduce_to(g * xhat, gamma.shape) if gamma.requires_grad else None)
        if beta is not None:
            grads.append(_reduce_to(g, beta.shape) if beta.requires_grad else None)
        return grads

    return _emit("layernorm", out, inputs, backward)


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001 - op name
    out = np.asarray(x.data.sum(axis=axis))

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _emit("sum", out, (x,), backward)


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    out = np.asarray(x.data.mean(axis=axis))

    def backward(g):
        if axis is None:
            return (np.full(x.shape, float(g) / n),)
        return (np.broadcast_to(np.expand_dims(g, axis) / n, x.shape).copy(),)

    return _emit("mean", out, (x,), backward)


def mse(pred: Tensor, target, weights: np.ndarray | None = None) -> Tensor:
    """Mean squared error, optionally a weighted mean with constant ``weights``."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ConfigError(f"mse: pred {pred.shape} vs target {target.shape}")
    diff = pred.data - target.data
    if weights is None:
        w = None
        denom = float(diff.size)
        out = np.asarray((diff * diff).sum() / denom)
    else:
        w = np.broadcast_to(np.asarray(weights, dtype=np.float64), diff.shape)
        denom = float(w.sum())
        if denom <= 0:
            raise ConfigError("mse: weights sum to zero")
        out = np.asarray((w * diff * diff).sum() / denom)

    def backward(g):
        gd = (2.0 * float(g) / denom) * (diff if w is None else w * diff)
        return (
            gd if pred.requires_grad else None,
            -gd if target.requires_grad else None,
        )

    return _emit("mse", out, (pred, target), backward)


def gather_rows(x: Tensor, index) -> Tensor:
    """Select rows along axis -2.

    ``x`` is (N, d) with index (M,), or (B, N, d) with index (M,) or (B, M).
    """
    idx = np.asarray(index, dtype=np.int64)
    if x.ndim == 2:
        if idx.ndim != 1:
            raise ConfigError("gather_rows on 2-D input needs a 1-D index")
        out = x.data[idx]

        def backward(g):
            gx = np.zeros_like(x.data)
            np.add.at(gx, idx, g)
            return (gx,)

        return _emit("gather_rows", out, (x,), backward)
    if x.ndim != 3:
        raise ConfigError(f"gather_rows supports 2-D/3-D input, got {x.shape}")
    b, n, d = x.shape
    if idx.ndim == 1:
        idx = np.broadcast_to(idx, (b, idx.shape[0]))
    if idx.shape[0] != b:
        raise ConfigError(f"gather_rows batch mismatch: {x.shape} vs index {idx.shape}")
    flat = (idx + (np.arange(b) * n)[:, None]).reshape(-1)
    out = x.data.reshape(b * n, d)[flat].reshape(b, idx.shape[1], d)

    def backward(g):
        gx = np.zeros((b * n, d))
        np.add.at(gx, flat, g.reshape(-1, d))
        return (gx.reshape(b, n, d),)

    return _emit("gather_rows", out, (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ConfigError(f"concat: {exc}") from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        parts = np.split(g, sizes, axis=axis)
        return tuple(p if t.requires_grad else None for p, t in zip(parts, tensors))

    return _emit("concat", out, tensors, backward)
