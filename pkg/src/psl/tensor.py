"""Dense float64 tensors with tape-free reverse-mode autodiff.

Every op that touches a ``requires_grad`` input records a node on the
result: the op kind, its parent tensors and a closure mapping the output
gradient to parent gradients.  Nodes carry a global, monotonically
increasing id, so sorting reachable nodes by id gives a topological order
and ``backward`` walks it in exact reverse.  The graph is released once
``backward`` finishes.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

_ids = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    """Raised when an operation receives inputs of non-conforming shape."""


@contextmanager
def no_grad():
    """Evaluate without recording any graph nodes."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class _Node:
    __slots__ = ("id", "kind", "parents", "backward")

    def __init__(self, kind: str, parents: tuple["Tensor", ...], backward: Callable):
        self.id = next(_ids)
        self.kind = kind
        self.parents = parents
        self.backward = backward


class Tensor:
    """An n-dimensional float64 array with an optional gradient."""

    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __sub__(self, other):
        return add(self, -_as_tensor(other))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: np.ndarray, kind: str, parents: Sequence[Tensor], backward_fn) -> Tensor:
    result = Tensor.__new__(Tensor)
    result.data = out
    result.grad = None
    result._node = None
    result.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
    if result.requires_grad:
        result._node = _Node(kind, tuple(parents), backward_fn)
    return result


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from None
    return _record(out, "add", (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from None
    return _record(out, "mul", (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record(np.where(mask, x.data, 0.0), "relu", (x,), lambda g: (g * mask,))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def swish(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    out = x.data * s
    return _record(out, "swish", (x,), lambda g: (g * (s + out * (1.0 - s)),))


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "swish":
        return swish(x)
    if kind == "none":
        return x
    raise ValueError(f"unknown activation {kind!r}")


def floor_scale(x: Tensor, beta: float, backward: str = "identity") -> Tensor:
    """Elementwise ``floor(beta * x) / beta``.

    ``backward="identity"`` passes the output gradient straight through;
    ``backward="exact"`` uses the true derivative, which is zero almost
    everywhere.
    """
    if not beta > 0:
        raise ValueError(f"floor_scale: beta must be positive, got {beta}")
    out = np.floor(beta * x.data) / beta
    if backward == "identity":
        fn = lambda g: (g,)
    elif backward == "exact":
        fn = lambda g: (np.zeros_like(g),)
    else:
        raise ValueError(f"floor_scale: unknown backward mode {backward!r}")
    return _record(out, "floor_scale", (x,), fn)


def sign(t: Tensor) -> Tensor:
    """Elementwise sign with sign(0) = 0.  Never recorded."""
    data = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    return Tensor(np.sign(data))


# ---------------------------------------------------------------- reductions


def sum_all(x: Tensor) -> Tensor:
    return _record(np.array(x.data.sum()), "sum", (x,),
                   lambda g: (np.broadcast_to(g, x.shape).copy(),))


def global_avg_pool(x: Tensor) -> Tensor:
    """N x C x H x W -> N x C mean over the spatial extent."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected N x C x H x W input, got shape {x.shape}")
    n, c, h, w = x.shape
    area = h * w
    out = x.data.mean(axis=(2, 3))
    return _record(out, "global_avg_pool", (x,),
                   lambda g: (np.broadcast_to((g / area)[:, :, None, None], x.shape).copy(),))


# ---------------------------------------------------------------- linear maps


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with x: N x F_in, weight: F_out x F_in."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"dense: bias shape {bias.shape} != ({weight.shape[0]},)")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def back(g):
        grads = (g @ weight.data if x.requires_grad else None,
                 g.T @ x.data if weight.requires_grad else None)
        return grads + (g.sum(axis=0),) if bias is not None else grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _record(out, "dense", parents, back)


_OFFSETS = tuple((dy, dx) for dy in range(3) for dx in range(3))


def _im2col(x: np.ndarray) -> np.ndarray:
    """N x C x H x W -> (C*9) x (N*H*W), row order (c, dy, dx) like a flattened kernel."""
    n, c, h, w = x.shape
    xp = np.zeros((c, n, h + 2, w + 2))
    xp[:, :, 1:-1, 1:-1] = x.transpose(1, 0, 2, 3)
    cols = np.empty((c, 9, n, h, w))
    for k, (dy, dx) in enumerate(_OFFSETS):
        cols[:, k] = xp[:, :, dy:dy + h, dx:dx + w]
    return cols.reshape(c * 9, n * h * w)


def _col2im(cols: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    n, c, h, w = shape
    cols = cols.reshape(c, 9, n, h, w)
    xp = np.zeros((c, n, h + 2, w + 2))
    for k, (dy, dx) in enumerate(_OFFSETS):
        xp[:, :, dy:dy + h, dx:dx + w] += cols[:, k]
    return np.ascontiguousarray(xp[:, :, 1:-1, 1:-1].transpose(1, 0, 2, 3))


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """3x3 cross-correlation, stride 1, zero padding 1 (output extent == input extent)."""
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d: expected N x C_in x H x W input, got shape {x.shape}")
    if kernel.data.ndim != 4 or kernel.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d: kernel must be C_out x C_in x 3 x 3, got {kernel.shape}")
    n, c_in, h, w = x.shape
    c_out = kernel.shape[0]
    if kernel.shape[1] != c_in:
        raise ShapeError(f"conv2d: input has C_in={c_in} but kernel expects C_in={kernel.shape[1]}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({c_out},)")

    cols = _im2col(x.data)
    wmat = kernel.data.reshape(c_out, c_in * 9)
    out = (wmat @ cols).reshape(c_out, n, h, w).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def back(g):
        gmat = g.transpose(1, 0, 2, 3).reshape(c_out, n * h * w)
        gw = (gmat @ cols.T).reshape(kernel.shape) if kernel.requires_grad else None
        gx = _col2im(wmat.T @ gmat, x.shape) if x.requires_grad else None
        grads = (gx, gw)
        return grads + (g.sum(axis=(0, 2, 3)),) if bias is not None else grads

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _record(out, "conv2d", parents, back)


def affine(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    """Learnable per-channel ``scale * x + shift`` over axis 1 (stand-in for batch norm)."""
    c = x.shape[1] if x.data.ndim >= 2 else -1
    if scale.shape != (c,) or shift.shape != (c,):
        raise ShapeError(f"affine: per-channel params {scale.shape}/{shift.shape} "
                         f"do not match {c} channels of input {x.shape}")
    bshape = (1, c) + (1,) * (x.data.ndim - 2)
    s = scale.data.reshape(bshape)
    out = x.data * s + shift.data.reshape(bshape)
    red = (0,) + tuple(range(2, x.data.ndim))
    return _record(out, "affine", (x, scale, shift),
                   lambda g: (g * s, (g * x.data).sum(axis=red), g.sum(axis=red)))


# ---------------------------------------------------------------- loss


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Cross-entropy of N x K logits against integer labels.

    ``reduction`` is ``"mean"`` (scalar) or ``"none"`` (per-example vector).
    """
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n, k = logits.shape
    if n and (labels.min() < 0 or labels.max() >= k):
        raise ShapeError(f"softmax_cross_entropy: labels out of range for {k} classes")
    lsm = log_softmax(logits.data)
    rows = np.arange(n)
    per = -lsm[rows, labels]

    def back(g):
        p = np.exp(lsm)
        p[rows, labels] -= 1.0
        if reduction == "mean":
            return (p * (g / n),)
        return (p * g[:, None],)

    if reduction == "mean":
        return _record(np.array(per.mean()), "softmax_cross_entropy", (logits,), back)
    if reduction == "none":
        return _record(per, "softmax_cross_entropy", (logits,), back)
    raise ValueError(f"unknown reduction {reduction!r}")


# ---------------------------------------------------------------- dispatch

_OPS: dict[str, Callable] = {
    "conv2d": conv2d,
    "dense": dense,
    "relu": relu,
    "swish": swish,
    "add": add,
    "mul": mul,
    "global_avg_pool": global_avg_pool,
    "softmax_cross_entropy": softmax_cross_entropy,
    "floor_scale": floor_scale,
    "affine": affine,
    "sum": sum_all,
}


def forward_op(kind: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """Apply the op named ``kind``; attributes are passed as keywords.

    >>> forward_op("relu", [Tensor([1.0, -1.0])]).data
    array([1., 0.])
    """
    try:
        fn = _OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}; expected one of {sorted(_OPS)}") from None
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------- backward


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every grad-requiring tensor reachable from ``loss``.

    Gradients accumulate into existing ``.grad`` arrays.  The recorded
    graph is released afterwards.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("backward: loss does not require grad")

    tensors: dict[int, Tensor] = {}
    stack = [loss]
    seen = {id(loss)}
    while stack:
        t = stack.pop()
        if t._node is not None:
            tensors[t._node.id] = t
            for p in t._node.parents:
                if p.requires_grad and id(p) not in seen:
                    seen.add(id(p))
                    stack.append(p)

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node_id in sorted(tensors, reverse=True):
        t = tensors[node_id]
        g = pending.pop(id(t), None)
        node = t._node
        t._node = None
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._node is None:
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
            elif id(parent) in pending:
                pending[id(parent)] = pending[id(parent)] + pg
            else:
                pending[id(parent)] = pg

    # loss itself was a leaf
    if id(loss) in pending and not tensors:
        g = pending.pop(id(loss))
        loss.grad = g if loss.grad is None else loss.grad + g


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
