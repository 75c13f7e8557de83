"""Dense float64 tensors with reverse-mode automatic differentiation.

Every tensor produced by an operation records its parents and a closure that
maps the output gradient to parent gradients. ``backward`` orders the graph by
creation id (which is a topological order) and walks it in exact reverse.
Graphs are single use: once a loss has been backpropagated, its interior
nodes are released and a second ``backward`` raises :class:`GraphError`.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

DTYPE = np.float64

_ids = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ConfigError(ValueError):
    """A structural parameter is invalid (e.g. width not divisible by heads)."""


class GraphError(RuntimeError):
    """Misuse of the computation graph (non-scalar loss, reused graph)."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_id", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._id = next(_ids)
        self._consumed = False

    # -- construction helpers -------------------------------------------------
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
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operator sugar -------------------------------------------------------
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], fn: Callable) -> Tensor:
    """Wrap an op result; record it in the graph only if a parent needs grad."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._id = next(_ids)
    out._consumed = False
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
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


# -- elementwise arithmetic ---------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape),
                            _unbroadcast(-g * out / bd, bd.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def clamp(a, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip values; the gradient is zero wherever clipping was active."""
    a = as_tensor(a)
    ad = a.data
    out = np.clip(ad, lo, hi)
    keep = np.ones_like(ad, dtype=bool)
    if lo is not None:
        keep &= ad >= lo
    if hi is not None:
        keep &= ad <= hi
    return _make(out, (a,), lambda g: (g * keep,))


def gelu(a) -> Tensor:
    """Exact GELU, x * Phi(x), with Phi the standard normal CDF."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return _make(x * cdf, (a,), lambda g: (g * (cdf + x * pdf),))


# -- reductions and shape ops -------------------------------------------------

def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out, dtype=DTYPE), (a,), fn)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def fn(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(a.data[idx], dtype=DTYPE), (a,), fn)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``weight[ids]`` with scatter-add backward."""
    ids = np.asarray(ids, dtype=np.int64)
    n = weight.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"token id out of range [0, {n}): min={ids.min()}, max={ids.max()}")
    return getitem(weight, ids)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in ts], axis=axis), ts,
                 lambda g: tuple(np.split(g, cuts, axis=axis)))


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(np.broadcast_to(a.data, shape).copy(), (a,),
                 lambda g: (_unbroadcast(g, old),))


# -- linear algebra -----------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product with numpy batch broadcasting.

    ``dA = dC @ B^T`` and ``dB = A^T @ dC``, each reduced over broadcast
    batch axes.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree for shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    shared = bd.ndim == 2 and ad.ndim > 2
    if shared:
        # shared weight: fold batch axes into rows so each product is one GEMM
        out = (ad.reshape(-1, ad.shape[-1]) @ bd).reshape(ad.shape[:-1] + bd.shape[-1:])
    else:
        try:
            out = np.matmul(ad, bd)
        except ValueError as exc:
            raise ShapeError(f"matmul: cannot broadcast shapes {a.shape} and {b.shape}") from exc

    def fn(g):
        if shared:
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ bd.T).reshape(ad.shape)
            gb = ad.reshape(-1, ad.shape[-1]).T @ g2
        else:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
            gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _make(out, (a, b), fn)


# -- normalisation, softmax, losses ------------------------------------------

def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), fn)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _make(out, (a,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def layernorm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply ``gamma * xhat + beta``."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gamma.data
    d = xd.shape[-1]

    def fn(g):
        red = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=red)
        dbeta = g.sum(axis=red)
        gx = g * gd
        dx = rstd * (gx - gx.mean(axis=-1, keepdims=True)
                     - xhat * (gx * xhat).sum(axis=-1, keepdims=True) / d)
        return dx, dgamma, dbeta

    return _make(xhat * gd + beta.data, (x, gamma, beta), fn)


def l2_normalize(x, eps: float = 1e-12) -> Tensor:
    """Scale each last-axis slice to unit Euclidean norm (norm floored at eps)."""
    x = as_tensor(x)
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=-1, keepdims=True))
    floored = norm < eps
    n = np.maximum(norm, eps)
    out = xd / n

    def fn(g):
        proj = (g * out).sum(axis=-1, keepdims=True)
        dx = (g - np.where(floored, 0.0, out * proj)) / n
        return (dx,)

    return _make(out, (x,), fn)


def cross_entropy_from_logits(logits, targets) -> Tensor:
    """Mean over rows of ``-log softmax(logits)[row, target]``."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects b x n logits, got {logits.shape}")
    b, n = logits.shape
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.shape[0] != b:
        raise ShapeError(f"{b} rows of logits but {t.shape[0]} targets")
    if t.size and (t.min() < 0 or t.max() >= n):
        raise IndexError(f"target index out of range [0, {n})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(b)
    loss = -logp[rows, t].mean()

    def fn(g):
        d = np.exp(logp)
        d[rows, t] -= 1.0
        return (d * (g / b),)

    return _make(np.asarray(loss, dtype=DTYPE), (logits,), fn)


def bce_with_logits(logits, labels) -> Tensor:
    """Mean binary cross-entropy, computed as max(z, 0) - y*z + log1p(e^-|z|)."""
    logits = as_tensor(logits)
    z = logits.data
    y = np.asarray(labels, dtype=DTYPE).reshape(z.shape)
    # the log1p tail is computed on its own so large |z| does not cancel
    loss = (np.maximum(z, 0.0) - y * z + np.log1p(np.exp(-np.abs(z)))).mean()
    n = z.size
    sig = 0.5 * (1.0 + np.tanh(0.5 * z))

    def fn(g):
        return ((sig - y) * (g / n),)

    return _make(np.asarray(loss, dtype=DTYPE), (logits,), fn)


# -- attention ----------------------------------------------------------------

def multihead_attention(q, k, v, heads: int, key_mask: np.ndarray | None = None,
                        out_weight: Tensor | None = None,
                        out_bias: Tensor | None = None) -> Tensor:
    """Scaled dot-product attention split over ``heads``.

    q: b x Lq x d, k/v: b x Lk x d (already projected). ``key_mask`` is a
    b x Lk array with 1 for real keys and 0 for padding. Heads are
    concatenated and, when ``out_weight`` is given, linearly projected.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    b, lq, d = q.shape
    lk = k.shape[1]
    if d % heads:
        raise ConfigError(f"width {d} is not divisible by {heads} heads")
    if k.shape != (b, lk, d) or v.shape != (b, lk, d):
        raise ShapeError(f"attention shapes disagree: q {q.shape}, k {k.shape}, v {v.shape}")
    hd = d // heads
    qh = transpose(reshape(q, (b, lq, heads, hd)), (0, 2, 1, 3))
    kh = transpose(reshape(k, (b, lk, heads, hd)), (0, 2, 3, 1))
    vh = transpose(reshape(v, (b, lk, heads, hd)), (0, 2, 1, 3))
    scores = matmul(qh, kh) * (1.0 / math.sqrt(hd))
    if key_mask is not None:
        bias = np.where(np.asarray(key_mask)[:, None, None, :] > 0, 0.0, -1e9)
        scores = scores + bias
    attn = softmax(scores, axis=-1)
    ctx = transpose(matmul(attn, vh), (0, 2, 1, 3))
    out = reshape(ctx, (b, lq, d))
    if out_weight is not None:
        out = matmul(out, out_weight)
        if out_bias is not None:
            out = out + out_bias
    return out


# -- backward -----------------------------------------------------------------

def _collect(root: Tensor) -> list[Tensor]:
    seen: set[int] = set()
    order: list[Tensor] = []
    stack = [root]
    while stack:
        t = stack.pop()
        if t._id in seen:
            continue
        seen.add(t._id)
        order.append(t)
        stack.extend(t._parents)
    order.sort(key=lambda t: t._id, reverse=True)
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires-grad leaf."""
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("this graph has already been backpropagated; rebuild it")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor requiring grad")
    grads: dict[int, np.ndarray] = {loss._id: np.ones_like(loss.data)}
    for node in _collect(loss):
        g = grads.pop(node._id, None)
        if node._backward is None:
            if node.requires_grad and g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is not None:
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(parent._id)
                grads[parent._id] = pg if prev is None else prev + pg
        node._backward = None
        node._parents = ()
        node._consumed = True


def parameters_grad_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    return math.sqrt(total)
