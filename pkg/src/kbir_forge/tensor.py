"""Dense float64 tensors with reverse-mode differentiation.

Only the primitives the toy transformer needs are provided. Every forward op
checks its output for NaN/Inf and raises :class:`NumericFault` on the spot, so
a bad value is reported where it is produced rather than steps later.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64
_GELU_C = math.sqrt(2.0 / math.pi)
_grad_enabled = True


class NumericFault(ArithmeticError):
    """A forward or backward computation produced a non-finite value."""


@contextmanager
def compute_dtype(dtype):
    """Run forward computations in ``dtype`` (used for extended-precision oracles)."""
    global DTYPE
    prev, DTYPE = DTYPE, dtype
    try:
        yield
    finally:
        DTYPE = prev


@contextmanager
def no_grad():
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check(data: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(data).all():
        raise NumericFault(f"non-finite output from {op}")
    return data


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward=None, _op: str = ""):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self._op = _op

    # -- basics -----------------------------------------------------------
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
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    # -- graph ------------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf that requires it."""
        if grad is None:
            if self.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                _check(pg, f"backward of {node._op}")
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)


class Parameter(Tensor):
    __slots__ = ("name",)

    def __init__(self, name: str, data):
        super().__init__(np.array(data, dtype=DTYPE), requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    _check(data, op)
    req = _grad_enabled and any(p.requires_grad for p in parents)
    if not req:
        return Tensor(data, _op=op)
    return Tensor(data, True, tuple(parents), backward, op)


# -- elementwise ----------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)), "mul")


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GeLU."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd**3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def back(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * xd**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * d_inner),)

    return _node(out, (x,), back, "gelu")


# -- shape ----------------------------------------------------------------
def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def index(a: Tensor, idx) -> Tensor:
    """Basic or integer-array indexing (embedding lookups, row picks, slices)."""
    if isinstance(idx, list):
        idx = np.asarray(idx, dtype=np.int64)
    shape = a.shape

    def back(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, idx, g)
        return (full,)

    return _node(a.data[idx], (a,), back, "index")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, back, "concat")


# -- reductions -----------------------------------------------------------
def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), back, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / float(n))


def logsumexp(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    m = np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.log(s) + m
    soft = e / s

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    return _node(out if keepdims else np.squeeze(out, axis=axis), (a,), back, "logsumexp")


# -- linear algebra -------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError("matmul needs operands of rank >= 2")

    def back(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _node(np.matmul(ad, bd), (a, b), back, "matmul")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _node(s, (a,), back, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis with population variance, then scale and shift."""
    xd = x.data
    if gain.shape[-1] != xd.shape[-1] or bias.shape[-1] != xd.shape[-1]:
        raise ValueError("layer_norm gain/bias must match the last dimension")
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data

    def back(g):
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True) - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        ggain = _unbroadcast(g * xhat, gain.shape)
        gbias = _unbroadcast(g, bias.shape)
        return gx, ggain, gbias

    return _node(out, (x, gain, bias), back, "layer_norm")


# -- losses ---------------------------------------------------------------
def softmax_cross_entropy(logits: Tensor, targets: Sequence[int], weights: Sequence[float] | None = None) -> Tensor:
    """Negative log-likelihood of ``targets`` under row-wise softmax of ``logits``.

    Rows are averaged, or combined with ``weights`` when given
    (sum of weight * nll).
    """
    ld = logits.data
    if ld.ndim != 2:
        raise ValueError("logits must be [n, V]")
    t = np.asarray(targets, dtype=np.int64)
    n, v = ld.shape
    if t.shape != (n,):
        raise ValueError("need one target per row")
    if n and (t.min() < 0 or t.max() >= v):
        raise IndexError("target index out of range")
    if n == 0:
        return Tensor(0.0)
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=np.float64)
    m = ld.max(axis=1, keepdims=True)
    z = ld - m
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    nll = lse - z[rows, t]
    loss = np.mean(nll) if weights is None else np.dot(w.astype(nll.dtype), nll)

    def back(g):
        p = np.exp(z - lse[:, None])
        p[rows, t] -= 1.0
        return (p * (g * w.astype(p.dtype))[:, None],)

    return _node(np.asarray(loss), (logits,), back, "softmax_cross_entropy")


def bce_with_logits(logits: Tensor, labels: Sequence[float]) -> Tensor:
    """Mean binary cross-entropy of sigmoid(``logits``) against 0/1 ``labels``."""
    x = logits.data.reshape(-1)
    y = np.asarray(labels, dtype=x.dtype).reshape(-1)
    if x.shape != y.shape:
        raise ValueError("need one label per logit")
    n = x.size
    if n == 0:
        return Tensor(0.0)
    loss = np.mean(np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x))))
    shape = logits.shape

    def back(g):
        sig = 0.5 * (1.0 + np.tanh(0.5 * x))
        return (((sig - y) * (g / n)).reshape(shape),)

    return _node(np.asarray(loss), (logits,), back, "bce_with_logits")


# -- verification ---------------------------------------------------------
def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[Parameter],
    h: float = 1e-5,
    coords: int = 64,
    seed: int = 0,
    grad_transform: Callable[[np.ndarray], np.ndarray] | None = None,
    extended: bool = True,
) -> float:
    """Largest relative error between reverse-mode and central-difference gradients.

    Up to ``coords`` randomly chosen coordinates per parameter are probed;
    the relative error uses denominator max(|a|, |b|, 1e-8). The reverse-mode
    gradient is always the float64 one. With ``extended`` the two finite
    difference evaluations run in ``np.longdouble`` at the same float64 point,
    which keeps cancellation noise well below the 1e-8 floor.
    ``grad_transform`` is applied to the analytic gradient first, which lets
    callers check the checker.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    f().backward()
    analytic = {}
    for p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        analytic[id(p)] = grad_transform(g) if grad_transform is not None else g
        p.zero_grad()
    wide = np.longdouble if extended else np.float64
    saved = {id(p): p.data for p in params}
    rng = np.random.default_rng(seed)
    worst = 0.0
    try:
        with no_grad(), compute_dtype(wide):
            for p in params:
                p.data = saved[id(p)].astype(wide)
            for p in params:
                flat = p.data.reshape(-1)
                ga = analytic[id(p)].reshape(-1)
                k = min(coords, flat.size)
                for i in rng.choice(flat.size, size=k, replace=False):
                    old = flat[i]
                    flat[i] = old + wide(h)
                    fp = f().data[()]
                    flat[i] = old - wide(h)
                    fm = f().data[()]
                    flat[i] = old
                    num = float((fp - fm) / (2 * wide(h)))
                    a = float(ga[i])
                    worst = max(worst, abs(a - num) / max(abs(a), abs(num), 1e-8))
    finally:
        for p in params:
            p.data = saved[id(p)]
    return worst
