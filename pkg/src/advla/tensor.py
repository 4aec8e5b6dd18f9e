"""Dense tensors with a define-by-run reverse-mode gradient tape.

Only the operations the vision encoder and the cosine feature loss need are
provided. Every op records a closure that maps the output gradient to the
input gradients; :func:`backward` replays those closures in reverse
topological order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

DEFAULT_DTYPE = np.float64

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """A numpy array plus the bookkeeping needed for reverse-mode autodiff."""

    __slots__ = ("data", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or (data.dtype if isinstance(data, np.ndarray)
                                               and data.dtype in (np.float32, np.float64)
                                               else DEFAULT_DTYPE))
        self.data = arr
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    out.op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data

    need_a, need_b = a.requires_grad, b.requires_grad

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if need_a else None,
                _unbroadcast(g * ad, bd.shape) if need_b else None)

    return _make(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g / bd, ad.shape),
                _unbroadcast(-g * ad / (bd * bd), bd.shape))

    return _make(ad / bd, (a, b), bw, "div")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bw(g):
        return (g * c,)

    return _make(a.data * c, (a,), bw, "scale")


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / _SQRT2))

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return _make(xd * cdf, (x,), bw, "gelu")


# ---------------------------------------------------------------------------
# shape


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape

    def bw(g):
        return (g.reshape(old),)

    return _make(x.data.reshape(shape), (x,), bw, "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (g.transpose(inv),)

    return _make(x.data.transpose(axes), (x,), bw, "transpose")


# ---------------------------------------------------------------------------
# reductions


def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        count = int(np.prod([shape[a] for a in axes]))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _make(np.asarray(x.data.mean(axis=axis, keepdims=keepdims)), (x,), bw, "mean")


def l2_norm(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Euclidean norm over ``axis`` (all entries when None). Gradient is 0 at the origin."""
    xd = x.data
    n = np.sqrt(np.sum(xd * xd, axis=axis, keepdims=keepdims))

    def bw(g):
        nk = n if (axis is None or keepdims) else np.expand_dims(n, axis)
        gk = g if (axis is None or keepdims) else np.expand_dims(g, axis)
        safe = np.where(nk > 0, nk, 1.0)
        return (np.where(nk > 0, gk * xd / safe, 0.0),)

    return _make(np.asarray(n), (x,), bw, "l2_norm")


# ---------------------------------------------------------------------------
# linear algebra and normalisation


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    need_a, need_b = a.requires_grad, b.requires_grad

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if need_a else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if need_b else None
        return ga, gb

    return _make(ad @ bd, (a, b), bw, "matmul")


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis with row-max subtraction."""
    xd = x.data
    z = np.exp(xd - xd.max(axis=-1, keepdims=True))
    y = z / z.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return _make(y, (x,), bw, "softmax")


LAYERNORM_EPS = 1e-6


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYERNORM_EPS) -> Tensor:
    d = x.shape[-1]
    if d < 2:
        raise ShapeError("layernorm needs at least 2 features per row")
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gain.data

    need = (x.requires_grad, gain.requires_grad, bias.requires_grad)

    def bw(g):
        gin = ggain = gbias = None
        if need[0]:
            gx = g * gd
            gin = rstd * (gx - gx.mean(axis=-1, keepdims=True)
                          - xhat * np.mean(gx * xhat, axis=-1, keepdims=True))
        if need[1]:
            ggain = _unbroadcast(g * xhat, gain.shape)
        if need[2]:
            gbias = _unbroadcast(g, bias.shape)
        return gin, ggain, gbias

    return _make(xhat * gd + bias.data, (x, gain, bias), bw, "layernorm")


def cosine_similarity(a: Tensor, b: Tensor, eps: float = 1e-8, axis=None) -> Tensor:
    """(a.b) / (|a||b| + eps).

    With ``axis=None`` both operands are flattened into single vectors. With
    an axis the similarity is taken along it, giving one value per slice.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"cosine_similarity: shapes {a.shape} and {b.shape} differ")
    if not eps > 0:
        raise ValueError("eps must be positive")
    dot = tensor_sum(mul(a, b), axis=axis)
    denom = add(mul(l2_norm(a, axis=axis), l2_norm(b, axis=axis)), eps)
    return div(dot, denom)



def cosine_distance(a: Tensor, b: Tensor, eps: float = 1e-8, axis=None) -> Tensor:
    """1 - cosine_similarity(a, b, eps), without cancellation when cos is near 1.

    Uses |a||b| - a.b = |a||b| |u - v|^2 / 2 with u, v the unit vectors, so
    the result is (|a||b| |u - v|^2 / 2 + eps) / (|a||b| + eps). Falls back to
    the direct form when either operand has a zero norm.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"cosine_distance: shapes {a.shape} and {b.shape} differ")
    if not eps > 0:
        raise ValueError("eps must be positive")
    na, nb = l2_norm(a, axis=axis, keepdims=True), l2_norm(b, axis=axis, keepdims=True)
    if not (np.all(na.data > 0) and np.all(nb.data > 0)):
        return sub(1.0, cosine_similarity(a, b, eps, axis))
    diff = sub(div(a, na), div(b, nb))
    sq = tensor_sum(mul(diff, diff), axis=axis)
    nn = mul(l2_norm(a, axis=axis), l2_norm(b, axis=axis))
    return div(add(scale(mul(nn, sq), 0.5), eps), add(nn, eps))

# ---------------------------------------------------------------------------
# backward


@dataclass(frozen=True)
class TapeRecord:
    op: str
    inputs: tuple[int, ...]
    output: int


def tape(loss: Tensor) -> list[Tensor]:
    """Nodes reachable from ``loss`` in topological order (inputs first)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
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
    return order


def tape_records(loss: Tensor) -> list[TapeRecord]:
    return [TapeRecord(n.op, tuple(id(p) for p in n._parents), id(n)) for n in tape(loss)]


def backward(loss: Tensor, wrt: Sequence[Tensor] | None = None) -> dict[int, np.ndarray]:
    """Gradients of a scalar ``loss`` keyed by ``id(tensor)``.

    All requires-grad leaves reached from the loss get an entry; tensors in
    ``wrt`` that the graph never touches get explicit zero gradients.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    leaves: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(tape(loss)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                leaves[id(node)] = g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
    for t in wrt or ():
        if id(t) not in leaves:
            leaves[id(t)] = np.zeros_like(t.data)
    return leaves


def grad(loss: Tensor, inputs: Sequence[Tensor]) -> list[np.ndarray]:
    g = backward(loss, wrt=inputs)
    return [g[id(t)] for t in inputs]


def numerical_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-4,
                   indices=None) -> np.ndarray:
    """Central finite differences of scalar ``f`` at ``x``.

    ``indices`` restricts evaluation to those flat positions; other entries
    come back as NaN.
    """
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    out = np.full(flat.shape, np.nan)
    idx = range(flat.size) if indices is None else indices
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        out[i] = (fp - fm) / (2 * h)
    return out.reshape(x.shape)


def relative_error(g: np.ndarray, g_fd: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """Elementwise |g - g_fd| / max(|g|, |g_fd|, floor)."""
    g = np.asarray(g, dtype=np.float64)
    g_fd = np.asarray(g_fd, dtype=np.float64)
    return np.abs(g - g_fd) / np.maximum(np.maximum(np.abs(g), np.abs(g_fd)), floor)
