"""Dense float64 arrays with reverse-mode automatic differentiation.

Every differentiable operation builds a node holding its parents and a
closure that maps the output gradient to parent gradients.  ``backward``
walks the graph in reverse topological order and accumulates into
``Tensor.grad``.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """An n-dimensional float64 array that can record gradients."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.array(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self) -> None:
        backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Iterable[Tensor], fn) -> Tensor:
    parents = tuple(parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = ""
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tracked tensor that ``loss`` depends on."""
    if loss.size != 1:
        raise ShapeError(f"backward() needs a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor with requires_grad")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------- elementwise

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def square(a: Tensor) -> Tensor:
    return _node(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    out = _stable_sigmoid(a.data)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


# ---------------------------------------------------------------- reductions

def sum_all(a: Tensor) -> Tensor:
    return _node(np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    n = a.size
    return _node(np.array(a.data.mean()), (a,),
                 lambda g: (np.full(a.shape, float(g) / n),))


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C), averaging over the spatial axes."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool expects (N, C, H, W), got {x.shape}")
    n, c, h, w = x.shape
    return _node(x.data.mean(axis=(2, 3)), (x,),
                 lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),))


# ---------------------------------------------------------------- shape ops

def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def fn(g):
        index = [slice(None)] * g.ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            index[axis] = slice(lo, hi)
            parts.append(g[tuple(index)])
        return parts

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, fn)


def take_columns(x: Tensor, start: int, stop: int) -> Tensor:
    """Slice ``x[:, start:stop]`` with gradient routing."""
    def fn(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return _node(x.data[:, start:stop], (x,), fn)


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} do not align")
    return _node(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight.T + bias`` with weight stored as (out, in)."""
    if x.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear expects (N, {weight.shape[1]}), got {x.shape}")
    out = x.data @ weight.data.T + bias.data

    def fn(g):
        return g @ weight.data, g.T @ x.data, g.sum(axis=0)

    return _node(out, (x, weight, bias), fn)


def _im2col(x: np.ndarray, kh: int, kw: int, pad: int, stride: int):
    """Patch matrix of an (N, C, H, W) array, rows ordered (n, y, x), columns (c, i, j)."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = windows.shape[:4]
    return windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw), ho, wo


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1,
           padding: Optional[int] = None) -> Tensor:
    """2-D cross-correlation over (N, C, H, W) with weight (O, C, k, k).

    ``padding=None`` means "same" zero padding, ``k // 2``.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d expects (N, C, H, W), got {x.shape}")
    n, c, h, w = x.shape
    o, wc, kh, kw = weight.shape
    if wc != c:
        raise ShapeError(f"conv2d weight expects {wc} input channels, got {c}")
    pad = kh // 2 if padding is None else padding
    cols, ho, wo = _im2col(x.data, kh, kw, pad, stride)
    wmat = weight.data.reshape(o, -1)
    out = (cols @ wmat.T + bias.data).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def fn(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (gm.T @ cols).reshape(weight.shape)
        gb = gm.sum(axis=0)
        if not x.requires_grad:
            return None, gw, gb
        # input gradient = full correlation of the (dilated) output gradient
        # with the spatially flipped, channel-transposed kernel
        full = np.zeros((n, o, h + kh - 1, w + kw - 1))
        top, left = kh - 1 - pad, kw - 1 - pad
        rows = min((ho - 1) * stride + 1, h + pad - top)
        span = min((wo - 1) * stride + 1, w + pad - left)
        full[:, :, top:top + rows:stride, left:left + span:stride] = \
            g[:, :, :(rows - 1) // stride + 1, :(span - 1) // stride + 1]
        gcols, _, _ = _im2col(full, kh, kw, 0, 1)
        flipped = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, -1)
        gx = (gcols @ flipped.T).reshape(n, h, w, c).transpose(0, 3, 1, 2)
        return gx, gw, gb

    return _node(np.ascontiguousarray(out), (x, weight, bias), fn)


# ---------------------------------------------------------------- softmax & losses

def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax of a plain array (max-subtracted)."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _node(out, (x,), lambda g: (g - p * g.sum(axis=1, keepdims=True),))


def cross_entropy_loss(logits: Tensor, labels, num_classes: int = 5) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels)
    if logits.data.ndim != 2 or logits.shape[1] != num_classes:
        raise ShapeError(f"expected logits of shape (batch, {num_classes}), got {logits.shape}")
    if labels.shape != (logits.shape[0],):
        raise ShapeError(f"{labels.shape[0] if labels.ndim else 0} labels for batch of {logits.shape[0]}")
    if not np.issubdtype(labels.dtype, np.integer) or labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(f"labels must be integers in [0, {num_classes})")
    logp = log_softmax(logits)
    n = logits.shape[0]
    rows = np.arange(n)
    value = -logp.data[rows, labels].mean()

    def fn(g):
        grad = np.zeros_like(logp.data)
        grad[rows, labels] = -float(g) / n
        return (grad,)

    return _node(np.array(value), (logp,), fn)


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean of squared differences; ``pred`` is (batch,) or (batch, k)."""
    target = np.asarray(target, dtype=np.float64)
    if pred.shape[0] != target.shape[0]:
        raise ShapeError(f"batch size mismatch: {pred.shape[0]} predictions, {target.shape[0]} targets")
    target = target.reshape(pred.shape)
    diff = pred.data - target
    n = diff.size
    return _node(np.array((diff * diff).mean()), (pred,), lambda g: (2.0 * float(g) * diff / n,))


def bce_with_logits(logits: Tensor, target) -> Tensor:
    """Mean binary cross-entropy of sigmoid(logits) against 0/1 targets."""
    target = np.asarray(target, dtype=np.float64).reshape(logits.shape)
    x = logits.data
    per = np.maximum(x, 0) - x * target + np.log1p(np.exp(-np.abs(x)))
    n = per.size
    p = _stable_sigmoid(x)
    return _node(np.array(per.mean()), (logits,), lambda g: (float(g) * (p - target) / n,))
