"""Dense float tensors with reverse-mode automatic differentiation.

Arrays are plain row-major numpy buffers. Every differentiable op records a
closure that maps the gradient of its output to gradients of its inputs;
``Tensor.backward`` walks the recorded graph in reverse topological order.

Elementwise binary ops accept identical shapes, python scalars, or a
*leading-batch expansion* where the smaller operand's shape equals the
trailing dims of the larger one (e.g. a ``(C,)`` bias onto ``(B, L, C)``).
Anything else needs an explicit ``broadcast_to`` / ``reshape``.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "tensor",
    "zeros",
    "ones",
    "no_grad",
    "is_grad_enabled",
    "float_mode",
    "set_float_mode",
    "get_dtype",
    "add",
    "sub",
    "mul",
    "matmul",
    "linear",
    "conv1d",
    "upsample_nearest1d",
    "group_norm",
    "silu",
    "mish",
    "softmax",
    "concat",
    "stack",
    "scaled_dot_product_attention",
]


class ShapeError(ValueError):
    """Operand shapes do not conform for an op."""


# ---------------------------------------------------------------------------
# global modes

_DTYPE = np.float32
_GRAD_ENABLED = True


def get_dtype() -> type:
    return _DTYPE


def set_float_mode(bits: int) -> None:
    """Select 32- or 64-bit floats for newly created tensors."""
    global _DTYPE
    if bits == 32:
        _DTYPE = np.float32
    elif bits == 64:
        _DTYPE = np.float64
    else:
        raise ValueError(f"float mode must be 32 or 64, got {bits}")


@contextlib.contextmanager
def float_mode(bits: int):
    prev = 64 if _DTYPE == np.float64 else 32
    set_float_mode(bits)
    try:
        yield
    finally:
        set_float_mode(prev)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference, finite differences)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


# ---------------------------------------------------------------------------
# tensor


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or _DTYPE)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = ""

    # -- basic properties --------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- autograd ------------------------------------------------------------
    def backward(self, ensure: Iterable[Tensor] | None = None) -> None:
        """Populate ``.grad`` on every requires-grad leaf reachable from this scalar.

        Calling ``backward`` again while any reachable leaf still holds a
        gradient raises instead of accumulating; zero the grads first.
        Tensors listed in ``ensure`` that the loss does not depend on receive
        an all-zero gradient.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward: loss must be a scalar, got shape {self.shape}")
        order = _topo_order(self)
        leaves = [n for n in order if n.is_leaf and n.requires_grad]
        stale = [n for n in leaves if n.grad is not None]
        if stale:
            names = ", ".join(n.name or f"<{n.shape}>" for n in stale[:3])
            raise RuntimeError(f"backward: gradients already populated for {names}; call zero_grad() first")
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.requires_grad:
                    node.grad = g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        if ensure is not None:
            for t in ensure:
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)

    # -- operator sugar --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / float(other))

    def __rtruediv__(self, other):
        return mul(reciprocal(self), float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def broadcast_to(self, shape):
        return broadcast_to(self, tuple(shape))

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def sin(self):
        return sin(self)

    def square(self):
        return square(self)


def _raise_item(t: Tensor):
    raise ShapeError(f"item: tensor of shape {t.shape} is not a scalar")


def _topo_order(root: Tensor) -> list[Tensor]:
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def zeros(shape, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_DTYPE), requires_grad=requires_grad, name=name)


def ones(shape, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.ones(shape, dtype=_DTYPE), requires_grad=requires_grad, name=name)


# ---------------------------------------------------------------------------
# elementwise binary


def _expansion(op: str, a: Tensor, b: Tensor) -> tuple[int, int]:
    """Return how many leading axes each operand is expanded over."""
    sa, sb = a.shape, b.shape
    if sa == sb:
        return 0, 0
    if len(sb) < len(sa) and sa[len(sa) - len(sb):] == sb:
        return 0, len(sa) - len(sb)
    if len(sa) < len(sb) and sb[len(sb) - len(sa):] == sa:
        return len(sb) - len(sa), 0
    raise ShapeError(f"{op}: incompatible shapes {sa} and {sb} (only leading-batch expansion is implicit)")


def _reduce_leading(g: np.ndarray, n: int) -> np.ndarray:
    return g.reshape((-1,) + g.shape[n:]).sum(axis=0) if n else g


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = _wrap(a)
        c = float(b)
        return _result(a.data + c, (a,), lambda g: (g,), "add")
    if not isinstance(a, Tensor):
        return add(b, a)
    na, nb = _expansion("add", a, b)
    return _result(a.data + b.data, (a, b), lambda g: (_reduce_leading(g, na), _reduce_leading(g, nb)), "add")


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    if not isinstance(a, Tensor):
        return add(neg(b), a)
    na, nb = _expansion("sub", a, b)
    return _result(a.data - b.data, (a, b), lambda g: (_reduce_leading(g, na), -_reduce_leading(g, nb)), "sub")


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = _wrap(a)
        c = float(b)
        return _result(a.data * c, (a,), lambda g: (g * c,), "mul")
    if not isinstance(a, Tensor):
        return mul(b, a)
    na, nb = _expansion("mul", a, b)
    ad, bd = a.data, b.data

    def backward(g):
        return _reduce_leading(g * bd, na), _reduce_leading(g * ad, nb)

    return _result(ad * bd, (a, b), backward, "mul")


# ---------------------------------------------------------------------------
# elementwise unary


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def reciprocal(a: Tensor) -> Tensor:
    y = 1.0 / a.data
    return _result(y, (a,), lambda g: (-g * y * y,), "reciprocal")


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    x = a.data
    return _result(x**p, (a,), lambda g: (g * p * x ** (p - 1.0),), "pow")


def square(a: Tensor) -> Tensor:
    x = a.data
    return _result(x * x, (a,), lambda g: (2.0 * g * x,), "square")


def sqrt(a: Tensor) -> Tensor:
    y = np.sqrt(a.data)
    return _result(y, (a,), lambda g: (0.5 * g / y,), "sqrt")


def abs_(a: Tensor) -> Tensor:
    x = a.data
    return _result(np.abs(x), (a,), lambda g: (g * np.sign(x),), "abs")


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _result(y, (a,), lambda g: (g * y,), "exp")


def log(a: Tensor) -> Tensor:
    x = a.data
    return _result(np.log(x), (a,), lambda g: (g / x,), "log")


def sin(a: Tensor) -> Tensor:
    x = a.data
    return _result(np.sin(x), (a,), lambda g: (g * np.cos(x),), "sin")


def cos(a: Tensor) -> Tensor:
    x = a.data
    return _result(np.cos(x), (a,), lambda g: (-g * np.sin(x),), "cos")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _result(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # |x| > 80 is saturated in both precisions; the clip only prevents exp overflow
    return 1.0 / (1.0 + np.exp(-np.clip(x, -80.0, 80.0)))


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    return _result(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def relu(a: Tensor) -> Tensor:
    x = a.data
    return _result(np.maximum(x, 0), (a,), lambda g: (g * (x > 0),), "relu")


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = _sigmoid(x)
    return _result(x * s, (a,), lambda g: (g * (s + x * s * (1.0 - s)),), "silu")


def mish(a: Tensor) -> Tensor:
    """x * tanh(softplus(x)), via tanh(log1p(e)) = n / (n + 2) with n = e (e + 2)."""
    x = a.data
    e = np.exp(np.minimum(x, 20.0))
    n = e * (e + 2.0)
    th = n / (n + 2.0)

    def backward(g):
        sig = e / (1.0 + e)
        return (g * (th + x * (1.0 - th * th) * sig),)

    return _result(x * th, (a,), backward, "mish")


# ---------------------------------------------------------------------------
# reductions and shape ops


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape
    kept = tuple(1 if i in axes else s for i, s in enumerate(shape))

    def backward(g):
        return (np.broadcast_to(g.reshape(kept), shape).copy(),)

    return _result(np.sum(a.data, axis=axes, keepdims=keepdims), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(sum_(a, axis, keepdims), 1.0 / n)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {src} into {tuple(shape)}") from exc
    return _result(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def broadcast_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Explicit expansion of size-1 axes (and new leading axes) to ``shape``."""
    src = a.shape
    lead = len(shape) - len(src)
    if lead < 0 or any(s != 1 and s != t for s, t in zip(src, shape[lead:])):
        raise ShapeError(f"broadcast_to: cannot expand {src} to {tuple(shape)}")
    expanded = tuple(i + lead for i, s in enumerate(src) if s == 1 and shape[i + lead] != 1)

    def backward(g):
        if lead:
            g = g.reshape((-1,) + g.shape[lead:]).sum(axis=0)
        if expanded:
            g = g.sum(axis=tuple(i - lead for i in expanded), keepdims=True)
        return (g,)

    return _result(np.broadcast_to(a.data, shape).copy(), (a,), backward, "broadcast_to")


def getitem(a: Tensor, idx) -> Tensor:
    src_shape = a.shape
    dtype = a.data.dtype

    def backward(g):
        full = np.zeros(src_shape, dtype=dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _result(a.data[idx], (a,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    ndim = tensors[0].ndim
    ax = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(s != r for i, (s, r) in enumerate(zip(t.shape, tensors[0].shape)) if i != ax):
            raise ShapeError(f"concat: shapes {tensors[0].shape} and {t.shape} differ off axis {axis}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors)))

    return _result(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    ax = axis % (tensors[0].ndim + 1)
    expanded = [reshape(t, t.shape[:ax] + (1,) + t.shape[ax:]) for t in tensors]
    return concat(expanded, axis=ax)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` may be a 2-D matrix shared across ``a``'s leading axes, or carry the
    same leading axes as ``a``.
    """
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    shared = b.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ in {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if shared:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _result(ad @ bd, (a, b), backward, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` with ``w`` of shape (in, out)."""
    y = matmul(x, w)
    return add(y, b) if b is not None else y


# ---------------------------------------------------------------------------
# convolution / resampling


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int | None = None) -> Tensor:
    """Cross-correlation along the time axis of a channels-last sequence.

    x: (B, L, Cin), w: (Cout, Cin, K), b: (Cout,) -> (B, Lout, Cout) with
    ``out[:, j] = sum_k xpad[:, j * stride + k] @ w[:, :, k].T``. ``padding``
    defaults to ``K // 2`` zeros on both ends, which keeps the length at
    stride 1 for odd K.
    """
    if x.ndim != 3 or w.ndim != 3 or x.shape[2] != w.shape[1]:
        raise ShapeError(f"conv1d: input {x.shape} does not match kernel {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"conv1d: bias {b.shape} does not match kernel {w.shape}")
    B, L, cin = x.shape
    cout, _, K = w.shape
    pad = K // 2 if padding is None else int(padding)
    Lp = L + 2 * pad
    if Lp < K or stride < 1:
        raise ShapeError(f"conv1d: input {x.shape} too short for kernel {w.shape} with padding {pad}")
    lout = (Lp - K) // stride + 1
    span = stride * (lout - 1) + 1
    if pad:
        xp = np.zeros((B, Lp, cin), dtype=x.data.dtype)
        xp[:, pad:pad + L] = x.data
    else:
        xp = x.data
    cols = np.empty((B, lout, K, cin), dtype=x.data.dtype)
    for k in range(K):
        cols[:, :, k, :] = xp[:, k:k + span:stride, :]
    cols = cols.reshape(B * lout, K * cin)
    wmat = np.ascontiguousarray(w.data.transpose(2, 1, 0)).reshape(K * cin, cout)
    out = cols @ wmat
    if b is not None:
        out += b.data
    out = out.reshape(B, lout, cout)

    def backward(g):
        g2 = g.reshape(B * lout, cout)
        gw = (cols.T @ g2).reshape(K, cin, cout).transpose(2, 1, 0) if w.requires_grad else None
        gb = g2.sum(axis=0) if b is not None else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat.T).reshape(B, lout, K, cin)
            gxp = np.zeros((B, Lp, cin), dtype=g.dtype)
            for k in range(K):
                gxp[:, k:k + span:stride, :] += gcols[:, :, k, :]
            gx = gxp[:, pad:pad + L] if pad else gxp
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _result(out, parents, backward, "conv1d")


def upsample_nearest1d(x: Tensor, scale: int = 2) -> Tensor:
    """Repeat every time step of a (B, L, C) sequence ``scale`` times."""
    B, L, C = x.shape

    def backward(g):
        return (g.reshape(B, L, scale, C).sum(axis=2),)

    return _result(np.repeat(x.data, scale, axis=1), (x,), backward, "upsample")


def group_norm(x: Tensor, groups: int, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Group normalization of a channels-last (B, L, C) sequence.

    Statistics are taken over time and the C / groups channels of each group.
    """
    if x.ndim != 3 or x.shape[2] % groups:
        raise ShapeError(f"group_norm: {groups} groups do not divide input {x.shape}")
    if weight.shape != (x.shape[2],) or bias.shape != (x.shape[2],):
        raise ShapeError(f"group_norm: affine params {weight.shape}/{bias.shape} for input {x.shape}")
    B, L, C = x.shape
    xg = x.data.reshape(B, L, groups, C // groups)
    mu = xg.mean(axis=(1, 3), keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=(1, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    wd = weight.data
    out = xhat.reshape(B, L, C) * wd + bias.data

    def backward(g):
        gw = (g * xhat.reshape(B, L, C)).sum(axis=(0, 1))
        gb = g.sum(axis=(0, 1))
        gxhat = (g * wd).reshape(B, L, groups, C // groups)
        gx = inv * (
            gxhat
            - gxhat.mean(axis=(1, 3), keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=(1, 3), keepdims=True)
        )
        return gx.reshape(B, L, C), gw, gb

    return _result(out, (x, weight, bias), backward, "group_norm")


# ---------------------------------------------------------------------------
# attention


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), backward, "softmax")


def scaled_dot_product_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q k^T / sqrt(d)) v over (..., Lq, d), (..., Lk, d), (..., Lk, dv)."""
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention: q {q.shape}, k {k.shape}, v {v.shape} do not conform")
    scores = mul(matmul(q, k.swapaxes(-1, -2)), 1.0 / math.sqrt(q.shape[-1]))
    return matmul(softmax(scores, axis=-1), v)

