"""Dense float64 tensors with tape-based reverse-mode differentiation.

Usage::

    with Tape() as tape:
        w = tape.watch(Tensor(np.ones((3, 2))))
        loss = sum(relu(x @ w))
    grads = tape.backward(loss)        # {w.id: Tensor}

Operations executed while a tape is active are recorded on it if any of
their inputs is tracked (a watched leaf or the output of a recorded op).
Outside a tape the same functions simply evaluate, which is what the
prediction paths use.

Convention: the ReLU derivative at exactly 0 is 0.
"""

from __future__ import annotations

import itertools
import threading
from typing import Callable, Sequence

import numpy as np

from . import kernels

CHECK_FINITE = True

_ids = itertools.count()
_local = threading.local()


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or infinity."""


class TapeError(RuntimeError):
    """Misuse of the differentiation tape."""


class Tensor:
    __slots__ = ("data", "id")
    __array_priority__ = 100.0

    def __init__(self, data, *, check: bool = True):
        arr = np.asarray(data, dtype=np.float64)
        if check and CHECK_FINITE and not np.isfinite(arr).all():
            raise NonFiniteError("tensor data contains NaN or infinity")
        self.data = arr
        self.id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, data={np.array2string(self.data, threshold=8)})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _SliceGrad:
    """Adjoint that is nonzero only on ``index`` of a parent of ``shape``."""

    __slots__ = ("index", "value", "advanced")

    def __init__(self, index, value, advanced: bool):
        self.index = index
        self.value = value
        self.advanced = advanced


class Node:
    __slots__ = ("op", "inputs", "output", "vjp")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], output: Tensor, vjp: Callable):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


def _stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


class Tape:
    """Records operations for one reverse sweep; single-threaded."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._tracked: set[int] = set()
        self._leaves: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack()
        if not stack or stack[-1] is not self:
            raise TapeError("tapes must be exited in LIFO order")
        stack.pop()

    def watch(self, *tensors: Tensor):
        for t in tensors:
            if not isinstance(t, Tensor):
                raise TypeError(f"can only watch Tensor, got {type(t).__name__}")
            self._leaves[t.id] = t
            self._tracked.add(t.id)
        return tensors[0] if len(tensors) == 1 else tensors

    @property
    def leaves(self) -> list[Tensor]:
        return list(self._leaves.values())

    def _record(self, node: Node) -> None:
        if any(t.id in self._tracked for t in node.inputs):
            self.nodes.append(node)
            self._tracked.add(node.output.id)

    def backward(self, root: Tensor) -> dict[int, Tensor]:
        """Return d(root)/d(leaf) for every watched leaf, keyed by leaf id."""
        adj = self._sweep(root)
        return {
            lid: Tensor(adj[lid] if lid in adj else np.zeros(leaf.shape), check=False)
            for lid, leaf in self._leaves.items()
        }

    def gradient(self, root: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        adj = self._sweep(root)
        out = []
        for s in sources:
            if s.id not in self._leaves:
                raise TapeError("gradient source was not watched on this tape")
            g = adj.get(s.id)
            out.append(np.zeros(s.shape) if g is None else np.asarray(g, dtype=np.float64))
        return out

    def _sweep(self, root: Tensor) -> dict[int, np.ndarray]:
        if root.size != 1:
            raise TapeError(f"backward requires a scalar root, got shape {root.shape}")
        if root.id not in self._tracked:
            raise TapeError("root is not reachable from any watched leaf on this tape")
        adj: dict[int, np.ndarray] = {root.id: np.ones(root.shape)}
        owned: set[int] = {root.id}
        for node in reversed(self.nodes):
            g = adj.get(node.output.id)
            if g is None:
                continue
            if node.output.id not in self._leaves:
                del adj[node.output.id]
            grads = node.vjp(g)
            for inp, gi in zip(node.inputs, grads):
                if gi is None or inp.id not in self._tracked:
                    continue
                _accumulate(adj, owned, inp, gi)
        return adj


def _accumulate(adj: dict, owned: set, inp: Tensor, gi) -> None:
    key = inp.id
    if isinstance(gi, _SliceGrad):
        buf = adj.get(key)
        if buf is None:
            buf = np.zeros(inp.shape)
        elif key not in owned:
            buf = np.array(buf, dtype=np.float64)
        if gi.advanced:
            np.add.at(buf, gi.index, gi.value)
        else:
            buf[gi.index] += gi.value
        adj[key] = buf
        owned.add(key)
        return
    existing = adj.get(key)
    if existing is None:
        adj[key] = gi
        owned.discard(key)
    else:
        adj[key] = existing + gi
        owned.add(key)


def _emit(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    out = Tensor(data, check=False)
    if CHECK_FINITE and not np.isfinite(out.data).all():
        raise NonFiniteError(f"{op} produced NaN or infinity")
    stack = getattr(_local, "stack", None)
    if stack:
        node = Node(op, inputs, out, vjp)
        for tape in stack:
            tape._record(node)
    return out


# --------------------------------------------------------------------------
# op registry

OPS: dict[str, Callable] = {}


def register(name: str):
    def deco(fn):
        OPS[name] = fn
        return fn

    return deco


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


@register("add")
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _emit(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


@register("sub")
def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _emit(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


@register("mul")
def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _emit(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


@register("div")
def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data

    def vjp(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _emit("div", out, (a, b), vjp)


@register("neg")
def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


@register("matmul")
def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands with ndim >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dimensions of {a.shape} and {b.shape} do not broadcast") from None

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _emit("matmul", np.matmul(a.data, b.data), (a, b), vjp)


@register("relu")
def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _emit("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


@register("softplus")
def softplus(a) -> Tensor:
    a = as_tensor(a)
    return _emit("softplus", kernels.softplus(a.data), (a,), lambda g: (g * kernels.sigmoid(a.data),))


@register("sigmoid")
def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = kernels.sigmoid(a.data)
    return _emit("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


@register("exp")
def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g: (g * out,))


@register("log")
def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _emit("log", out, (a,), lambda g: (g / a.data,))


@register("square")
def square(a) -> Tensor:
    a = as_tensor(a)
    return _emit("square", a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


@register("sum")
def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(g, a.shape),)

    return _emit("sum", out, (a,), vjp)


@register("mean")
def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    if count == 0:
        raise ShapeError(f"mean over an empty axis of shape {a.shape}")
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(g / count, a.shape),)

    return _emit("mean", out, (a,), vjp)


@register("reshape")
def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} into {tuple(shape)}") from None
    return _emit("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def _is_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


@register("getitem")
def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    advanced = _is_advanced(index)
    try:
        out = a.data[index]
    except IndexError as exc:
        raise ShapeError(f"index {index!r} invalid for shape {a.shape}: {exc}") from None
    if not advanced:
        out = out.copy() if isinstance(out, np.ndarray) else np.asarray(out)
    return _emit("getitem", out, (a,), lambda g: (_SliceGrad(index, g, advanced),))


@register("gather")
def gather(a, indices, axis: int = 0) -> Tensor:
    """``np.take`` with 1-D ``indices`` along ``axis``; repeats accumulate in backward."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"gather expects 1-D indices, got shape {idx.shape}")
    axis = axis % a.ndim
    if idx.size and (idx.min() < -a.shape[axis] or idx.max() >= a.shape[axis]):
        raise ShapeError(f"gather indices out of range for axis {axis} of shape {a.shape}")

    def vjp(g):
        buf = np.zeros(a.shape)
        np.add.at(np.moveaxis(buf, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (buf,)

    return _emit("gather", np.take(a.data, idx, axis=axis), (a,), vjp)


@register("concat")
def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise ShapeError("concat of an empty sequence")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _emit("concat", out, ts, lambda g: tuple(np.split(g, bounds, axis=axis)))


@register("softmax_cross_entropy")
def softmax_cross_entropy(logits, labels) -> Tensor:
    """Per-row ``-log softmax(logits)[label]``; returns shape ``logits.shape[:-1]``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if labels.dtype.kind not in "iu":
        raise TypeError("labels must be integers")
    num_classes = logits.shape[-1]
    lead = logits.shape[:-1]
    try:
        labels = np.broadcast_to(labels, lead)
    except ValueError:
        raise ShapeError(f"labels of shape {labels.shape} do not match logits {logits.shape}") from None
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"label out of range for {num_classes} classes")
    flat_labels = labels.reshape(-1)
    loss, probs = kernels.softmax_xent(logits.data.reshape(-1, num_classes), flat_labels)

    def vjp(g):
        d = probs.copy()
        d[np.arange(d.shape[0]), flat_labels] -= 1.0
        return (d.reshape(logits.shape) * np.asarray(g)[..., None],)

    return _emit("softmax_cross_entropy", loss.reshape(lead), (logits,), vjp)


@register("reparam")
def reparam(mu, rho, eps) -> Tensor:
    """``mu + softplus(rho) * eps``; ``eps`` is constant noise of shape (..., n)."""
    mu, rho = as_tensor(mu), as_tensor(rho)
    eps = np.asarray(eps, dtype=np.float64)
    if mu.ndim != 1 or mu.shape != rho.shape or eps.shape[-1:] != mu.shape:
        raise ShapeError(f"reparam: mean {mu.shape}, rho {rho.shape}, noise {eps.shape} disagree")
    out = kernels.reparam_forward(mu.data, rho.data, eps)

    def vjp(g):
        return kernels.reparam_backward(rho.data, eps, g)

    return _emit("reparam", out, (mu, rho), vjp)


@register("gaussian_kl")
def gaussian_kl(mu, rho, target_mean, target_var) -> Tensor:
    """KL(N(mu, softplus(rho)^2) || N(target_mean, target_var)) summed over dims."""
    mu, rho = as_tensor(mu), as_tensor(rho)
    tm = np.asarray(target_mean, dtype=np.float64)
    tv = np.asarray(target_var, dtype=np.float64)
    if not (mu.shape == rho.shape == tm.shape == tv.shape) or mu.ndim != 1:
        raise ShapeError(f"gaussian_kl: shapes {mu.shape}, {rho.shape}, {tm.shape}, {tv.shape} disagree")
    value = kernels.gauss_kl(mu.data, rho.data, tm, tv)

    def vjp(g):
        gmu, grho = kernels.gauss_kl_grad(mu.data, rho.data, tm, tv)
        return g * gmu, g * grho

    return _emit("gaussian_kl", np.asarray(value), (mu, rho), vjp)
