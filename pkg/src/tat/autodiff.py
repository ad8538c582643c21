"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Operations on tensors that require
gradients record a node holding references to their parents and a closure
mapping the output gradient to parent gradients. :meth:`Tensor.backward`
orders the reachable graph topologically and visits every node once.

Only what the transformer needs is provided: broadcasting elementwise
arithmetic, batched matmul, reshaping and slicing, reductions, GELU (tanh
approximation, constants ``sqrt(2/pi)`` and ``0.044715``), sigmoid, softmax,
layer norm, the two classification losses, and the two graph-surgery nodes
:func:`stop_gradient` and :func:`grad_reverse`.
"""

from __future__ import annotations

import math
import os
from typing import Callable, Iterable, Sequence

import numpy as np

from tat import _kernels

DEFAULT_DTYPE = np.float64
_DEBUG = os.environ.get("TAT_DEBUG", "0") == "1"


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """Argument outside the mathematical domain of a function."""


class NumericError(FloatingPointError):
    """A non-finite value was produced."""


def set_debug(flag: bool) -> None:
    """Enable or disable the finiteness check after every forward op."""
    global _DEBUG
    _DEBUG = bool(flag)


class Tensor:
    __slots__ = ("data", "requires_grad", "_grad", "_parents", "_backward", "name", "_logit")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._grad = None
        self._parents = ()
        self._backward = None
        self.name = name
        self._logit = None

    # -- bookkeeping -------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def grad(self):
        if not self.requires_grad:
            return None
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value):
        self._grad = value

    def zero_grad(self):
        self._grad = None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into the ``grad`` of every reachable node.

        A tensor that does not require grad has no path to any leaf, so this
        is a no-op and every leaf keeps a zero gradient.
        """
        if not self.requires_grad:
            return
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() needs an explicit grad for shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        pending = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            node._grad = g if node._grad is None else node._grad + g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg

    # -- operator sugar ----------------------------------------------------

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _topo_order(root):
    order = []
    seen = set()
    stack = [(root, False)]
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


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and isinstance(x, (int, float)):
        dtype = DEFAULT_DTYPE
    return Tensor(x, dtype=dtype)


def _pair(a, b):
    """Coerce two operands to tensors; bare Python scalars adopt the other's dtype."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    return as_tensor(a), as_tensor(b)


def _result(data, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    if _DEBUG and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite value produced by {getattr(backward, '__qualname__', 'op')}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out._grad = None
    out.name = None
    out._logit = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic ------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    a, b = _pair(a, b)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result(ad * bd, (a, b), backward)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)

    def backward(g):
        return (g * c,)

    return _result(a.data * c, (a,), backward)


# -- linear algebra and shape ops -----------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes.

    Backward: ``dA = dC @ B^T`` and ``dB = A^T @ dC``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if b.ndim == 2 and a.ndim > 2:
        # stacked activations times one weight matrix: fold into a single GEMM
        lead = ad.shape[:-1]
        a2 = ad.reshape(-1, ad.shape[-1])
        out = (a2 @ bd).reshape(lead + (bd.shape[1],))

        def backward(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _result(out, (a, b), backward)

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result(ad @ bd, (a, b), backward)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inv),)

    return _result(np.transpose(a.data, axes), (a,), backward)


def swapaxes(a, i: int, j: int) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape

    def backward(g):
        return (g.reshape(old),)

    return _result(a.data.reshape(shape), (a,), backward)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape

    def backward(g):
        return (_unbroadcast(g, old),)

    return _result(np.broadcast_to(a.data, shape).copy(), (a,), backward)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _result(np.concatenate([t.data for t in ts], axis=axis), ts, backward)


def slice_(a, index) -> Tensor:
    """Basic (view) indexing; backward scatters into a zero buffer."""
    a = as_tensor(a)
    shape, dtype = a.shape, a.dtype

    def backward(g):
        out = np.zeros(shape, dtype=dtype)
        out[index] = g
        return (out,)

    return _result(np.array(a.data[index]), (a,), backward)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(sum_(a, axis, keepdims), 1.0 / n)


# -- nonlinearities --------------------------------------------------------


def gelu(a) -> Tensor:
    """GELU, tanh form: ``0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))``."""
    a = as_tensor(a)
    x = a.data
    y, t = _kernels.gelu(x)

    def backward(g):
        return (_kernels.gelu_grad(x, t, g),)

    return _result(y, (a,), backward)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)

    def backward(g):
        return (g * y * (1.0 - y),)

    out = _result(y, (a,), backward)
    out._logit = a  # lets binary_cross_entropy work from the logit
    return out


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    ax = axis % a.ndim
    x = np.moveaxis(a.data, ax, -1)
    y_last = _kernels.softmax_lastaxis(x)

    def backward(g):
        g_last = np.moveaxis(g, ax, -1)
        return (np.moveaxis(_kernels.softmax_lastaxis_grad(y_last, g_last), -1, ax),)

    return _result(np.moveaxis(y_last, -1, ax), (a,), backward)


def layer_norm(x, gain, bias, eps: float = 1e-6) -> Tensor:
    """Normalise the last axis to zero mean and unit variance, then ``* gain + bias``.

    ``eps`` sits inside the square root: ``(x - mu) / sqrt(var + eps)``.
    """
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: input {x.shape} with gain {gain.shape}, bias {bias.shape}")
    gd = np.ascontiguousarray(gain.data)
    y, xhat, rstd = _kernels.layer_norm(x.data, gd, np.ascontiguousarray(bias.data), eps)

    def backward(g):
        gx, g_gain, g_bias = _kernels.layer_norm_grad(g, xhat, rstd, gd)
        return gx, g_gain, g_bias

    return _result(y, (x, gain, bias), backward)


# -- losses ----------------------------------------------------------------


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-softmax of the true class (natural log)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n, c = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise IndexError(f"cross_entropy: labels must lie in [0, {c}), got {labels.tolist()}")
    x = logits.data
    m = x.max(axis=1, keepdims=True)
    shifted = x - m
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return _result(np.asarray(loss, dtype=x.dtype), (logits,), backward)


def binary_cross_entropy(probs, targets) -> Tensor:
    """Mean of ``-[y log p + (1-y) log(1-p)]`` over all elements.

    Only the term selected by the 0/1 target is evaluated, so exact agreement
    (p == y) gives exactly zero. Arguments of the log are floored at 1e-300.

    When ``probs`` is the direct output of :func:`sigmoid`, the loss is
    computed from the logit ``z`` as ``softplus(-z)`` or ``softplus(z)``
    and the gradient ``(p - y) / n`` goes straight to ``z``. This stays
    finite and informative where the rounded probability is exactly 0 or 1.
    """
    probs = as_tensor(probs)
    y = np.broadcast_to(np.asarray(targets, dtype=probs.dtype), probs.shape)
    p = probs.data
    if np.any((p < 0) | (p > 1)):
        raise DomainError("binary_cross_entropy: probabilities must lie in [0, 1]")
    if probs._logit is not None:
        return _bce_from_logit(probs._logit, p, y)
    pos = y > 0.5
    arg = np.where(pos, p, 1.0 - p)
    safe = np.maximum(arg, 1e-300)
    n = p.size
    loss = -np.log(safe).sum() / n

    def backward(g):
        d = np.where(arg > 1e-300, -1.0 / safe, 0.0)
        d = np.where(pos, d, -d)
        return ((g / n) * d.astype(p.dtype, copy=False),)

    return _result(np.asarray(loss, dtype=p.dtype), (probs,), backward)


def _bce_from_logit(logit: Tensor, p, y) -> Tensor:
    z = logit.data
    t = np.where(y > 0.5, -z, z)  # loss_i = softplus(t)
    n = z.size
    loss = (np.maximum(t, 0.0) + np.log1p(np.exp(-np.abs(t)))).sum() / n

    def backward(g):
        return ((g / n) * (p - y).astype(z.dtype, copy=False),)

    return _result(np.asarray(loss, dtype=z.dtype), (logit,), backward)


# -- graph surgery ---------------------------------------------------------


def stop_gradient(a) -> Tensor:
    """Value-identical copy that is a constant to the differentiation graph."""
    a = as_tensor(a)
    return Tensor(a.data.copy(), requires_grad=False)


def grad_reverse(a, lam: float = 1.0) -> Tensor:
    """Identity forward; backward multiplies the incoming gradient by ``-lam``."""
    if lam < 0:
        raise DomainError(f"grad_reverse: lambda must be >= 0, got {lam}")
    a = as_tensor(a)
    factor = -float(lam)

    def backward(g):
        return (g * factor,)

    return _result(a.data.copy(), (a,), backward)


# -- scalar helpers ----------------------------------------------------------


def binary_entropy(p):
    """Base-2 binary entropy ``-p log2 p - (1-p) log2 (1-p)``, ``0 log 0 = 0``.

    Accepts a scalar or an array; returns the same kind. Values lie in [0, 1].
    """
    arr = np.asarray(p, dtype=np.float64 if not isinstance(p, np.ndarray) else None)
    if np.any(~np.isfinite(arr)) or np.any((arr < 0) | (arr > 1)):
        raise DomainError("binary_entropy: p must lie in [0, 1]")
    q = 1.0 - arr
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(arr > 0, -arr * np.log2(np.where(arr > 0, arr, 1.0)), 0.0)
        b = np.where(q > 0, -q * np.log2(np.where(q > 0, q, 1.0)), 0.0)
    h = (a + b).astype(arr.dtype, copy=False)
    if np.ndim(p) == 0:
        return float(h)
    return h


def check_gradients(f: Callable[[Tensor], Tensor], x, step: float = 1e-5) -> float:
    """Compare autodiff gradients of scalar ``f`` at ``x`` with central differences.

    Returns ``max_i |analytic_i - numeric_i| / max(1, |analytic_i|)``.
    """
    x0 = np.array(as_tensor(x).data, dtype=np.float64)
    xt = Tensor(x0.copy(), requires_grad=True)
    out = f(xt)
    if out.data.size != 1:
        raise ShapeError("check_gradients: f must return a scalar")
    if not np.isfinite(out.data).all():
        raise NumericError("check_gradients: f is not finite at x")
    if out.requires_grad:
        out.backward()
        analytic = xt.grad.copy()
    else:
        analytic = np.zeros_like(x0)
    numeric = np.zeros_like(x0)
    flat = x0.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f(Tensor(x0.copy())).data)
        flat[i] = orig - step
        fm = float(f(Tensor(x0.copy())).data)
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericError(f"check_gradients: f not finite near coordinate {i}")
        numeric.reshape(-1)[i] = (fp - fm) / (2.0 * step)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0
