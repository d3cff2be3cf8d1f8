"""Reverse-mode automatic differentiation over dense float64 arrays.

A ``Tensor`` wraps a numpy array and remembers the operation that produced
it. ``Tensor.backward`` walks the recorded graph once, in reverse
topological order, and accumulates gradients additively into every
reachable tensor with ``requires_grad`` set; tensors without the flag are
left untouched. Callers zero gradients between optimization steps.

Design constraints:

* float64 everywhere; at desk scale speed is irrelevant and 64-bit makes
  finite-difference checks reliable.
* softmax and every loss built on it are computed in log-sum-exp form.
* no implicit randomness; sampling ops receive an explicit generator.
* broadcasting follows numpy rules, with gradients summed back to the
  operand shape.

Integer token ids live outside the graph as plain numpy integer arrays;
they enter through ``embedding``, ``one_hot`` and ``gather_last``.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import DimensionError, NumericError, ParameterError

_grad_enabled = True

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


@contextmanager
def no_grad():
    """Disable graph recording; use around decoding/evaluation loops."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Dense float64 array node in a reverse-mode graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

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

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate gradients of self into every reachable parameter.

        ``grad`` defaults to ones and must match ``self.shape``; for the
        common scalar-loss case it is simply 1.0.
        """
        if grad is None:
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=np.float64)
            if grad.shape != self.data.shape:
                raise DimensionError(
                    f"backward seed shape {grad.shape} != tensor shape {self.data.shape}"
                )
        # Iterative DFS; recursion depth would scale with graph size.
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        _accumulate(self, grad)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar -------------------------------------------------

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def parameter(data) -> Tensor:
    """Leaf tensor that collects gradients."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = _unbroadcast(g, t.data.shape)
    if t.grad is None:
        # copy: g may alias a consumer's gradient buffer
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, (gdim, sdim) in enumerate(zip(g.shape, shape)):
        if sdim == 1 and gdim != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# -- arithmetic ----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _node(out_data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data - b.data

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _node(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * b.data)
        if b.requires_grad:
            _accumulate(b, g * a.data)

    return _node(out_data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g / b.data)
        if b.requires_grad:
            _accumulate(b, -g * a.data / (b.data * b.data))

    return _node(out_data, (a, b), backward)


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    exponent = float(exponent)
    out_data = a.data ** exponent

    def backward(g):
        _accumulate(a, g * exponent * a.data ** (exponent - 1.0))

    return _node(out_data, (a,), backward)


def matmul(a, b) -> Tensor:
    """Matrix product; trailing two axes contract, leading axes broadcast.

    Backward accumulates ``a.grad += g @ b^T`` and ``b.grad += a^T @ g``
    (summed over broadcast batch axes).
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must have ndim >= 2")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(
            f"matmul inner extents differ: {a.data.shape} @ {b.data.shape}"
        )
    out_data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad:
            _accumulate(b, np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _node(out_data, (a, b), backward)


# -- elementwise nonlinearities -------------------------------------------


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def backward(g):
        _accumulate(a, g * out_data)

    return _node(out_data, (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.log(a.data)

    def backward(g):
        _accumulate(a, g / a.data)

    return _node(out_data, (a,), backward)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.tanh(a.data)

    def backward(g):
        _accumulate(a, g * (1.0 - out_data * out_data))

    return _node(out_data, (a,), backward)


def relu(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.maximum(a.data, 0.0)

    def backward(g):
        _accumulate(a, g * (a.data > 0.0))

    return _node(out_data, (a,), backward)


def gelu(a) -> Tensor:
    """Exact (erf-based) GELU; smooth, so finite differences stay honest."""
    a = as_tensor(a)
    cdf = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
    out_data = a.data * cdf

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * a.data * a.data)
        _accumulate(a, g * (cdf + a.data * pdf))

    return _node(out_data, (a,), backward)


# -- reductions and shape ops ---------------------------------------------


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.data.shape))
            return
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accumulate(a, np.broadcast_to(g, a.data.shape))

    return _node(out_data, (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.data.shape[ax] for ax in axes]))
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.reshape(shape)

    def backward(g):
        _accumulate(a, g.reshape(a.data.shape))

    return _node(out_data, (a,), backward)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.transpose(axes)

    def backward(g):
        if axes is None:
            _accumulate(a, g.transpose())
        else:
            _accumulate(a, g.transpose(np.argsort(axes)))

    return _node(out_data, (a,), backward)


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    perm = list(range(a.ndim))
    perm[ax1], perm[ax2] = perm[ax2], perm[ax1]
    return transpose(a, tuple(perm))


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for part, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            _accumulate(part, g[tuple(index)])

    return _node(out_data, tuple(parts), backward)


def getitem(a, index) -> Tensor:
    """Basic indexing (ints and slices) with scatter-style backward."""
    a = as_tensor(a)
    out_data = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] += g
        _accumulate(a, full)

    return _node(np.array(out_data, copy=True), (a,), backward)


# -- softmax family ---------------------------------------------------------


def softmax_temp(h, tau: float = 1.0) -> Tensor:
    """Temperature softmax over the last axis, log-sum-exp stabilized.

    Each last-axis slice of the result is ``exp(h/tau)`` normalized to sum
    to one. ``tau`` must be positive; smaller values sharpen the
    distribution, larger values flatten it.
    """
    h = as_tensor(h)
    tau = float(tau)
    if tau <= 0.0:
        raise ParameterError(f"softmax temperature must be positive, got {tau}")
    z = h.data / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * out_data).sum(axis=-1, keepdims=True)
        _accumulate(h, out_data * (g - inner) / tau)

    return _node(out_data, (h,), backward)


def log_softmax_temp(h, tau: float = 1.0) -> Tensor:
    """log of softmax_temp, computed without forming the softmax first."""
    h = as_tensor(h)
    tau = float(tau)
    if tau <= 0.0:
        raise ParameterError(f"softmax temperature must be positive, got {tau}")
    z = h.data / tau
    zmax = z.max(axis=-1, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out_data = shifted - lse
    probs = np.exp(out_data)

    def backward(g):
        inner = g.sum(axis=-1, keepdims=True)
        _accumulate(h, (g - probs * inner) / tau)

    return _node(out_data, (h,), backward)


# -- indexing ops -------------------------------------------------------


def one_hot(ids, num_classes: int) -> Tensor:
    """Constant one-hot rows; ids of any shape gain a trailing class axis."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= num_classes):
        raise IndexError(f"one_hot ids outside [0, {num_classes})")
    out = np.zeros(ids.shape + (num_classes,), dtype=np.float64)
    np.put_along_axis(out, ids[..., None], 1.0, axis=-1)
    return Tensor(out)


def gather_last(a, ids) -> Tensor:
    """Pick one element per last-axis slice: out[...] = a[..., ids[...]]."""
    a = as_tensor(a)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.shape != a.data.shape[:-1]:
        raise DimensionError(
            f"gather ids shape {ids.shape} must equal leading shape {a.data.shape[:-1]}"
        )
    if ids.size and (ids.min() < 0 or ids.max() >= a.data.shape[-1]):
        raise IndexError("gather index out of range")
    out_data = np.take_along_axis(a.data, ids[..., None], axis=-1)[..., 0]

    def backward(g):
        full = np.zeros_like(a.data)
        flat = full.reshape(-1, full.shape[-1])
        rows = np.arange(flat.shape[0])
        np.add.at(flat, (rows, ids.reshape(-1)), g.reshape(-1))
        _accumulate(a, full)

    return _node(out_data, (a,), backward)


def masked_fill(a, mask, value: float) -> Tensor:
    """Replace entries where ``mask`` is true; their gradient is dropped."""
    a = as_tensor(a)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.data.shape)
    out_data = np.where(mask, value, a.data)

    def backward(g):
        _accumulate(a, np.where(mask, 0.0, g))

    return _node(out_data, (a,), backward)


def embedding(table, ids) -> Tensor:
    """Row lookup into a (V, d) table; backward scatter-adds into rows."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise DimensionError("embedding table must be 2-D")
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise IndexError(
            f"embedding id outside [0, {table.data.shape[0]})"
        )
    out_data = table.data[ids]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.data.shape[-1]))
        _accumulate(table, full)

    return _node(out_data, (table,), backward)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance; affine output."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out_data = xhat * gain.data + bias.data

    def backward(g):
        dxhat = g * gain.data
        term = dxhat - dxhat.mean(axis=-1, keepdims=True) \
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        _accumulate(x, term * inv_std)
        reduce_axes = tuple(range(g.ndim - 1))
        _accumulate(gain, (g * xhat).sum(axis=reduce_axes))
        _accumulate(bias, g.sum(axis=reduce_axes))

    return _node(out_data, (x, gain, bias), backward)


def st_passthrough(soft: Tensor, hard: np.ndarray) -> Tensor:
    """Emit ``hard`` in the forward pass; pass gradients to ``soft`` unchanged.

    The identity-Jacobian contract behind every straight-through estimator:
    the discrete forward value and the differentiable surrogate share a
    shape, and backward pretends the two are equal.
    """
    soft = as_tensor(soft)
    hard = np.asarray(hard, dtype=np.float64)
    if hard.shape != soft.data.shape:
        raise DimensionError(
            f"straight-through shapes differ: {hard.shape} vs {soft.data.shape}"
        )

    def backward(g):
        _accumulate(soft, g)

    return _node(hard.copy(), (soft,), backward)


# -- verification -----------------------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-4) -> float:
    """Compare analytic gradients of a scalar function against central differences.

    Returns the maximum over coordinates of
    ``|analytic - numeric| / max(1, |numeric|)``. ``f`` must be
    deterministic; freeze any sampling before calling. ``x.grad`` is
    reset as a side effect.
    """
    out = f(x)
    if out.data.size != 1:
        raise DimensionError("grad_check requires a scalar-valued function")
    x.grad = None
    out.backward()
    analytic = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)
    if not np.isfinite(analytic).all():
        raise NumericError("analytic gradient contains non-finite values")
    flat = x.data.reshape(-1)
    aflat = analytic.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + eps
        f_plus = float(f(x).data)
        flat[i] = keep - eps
        f_minus = float(f(x).data)
        flat[i] = keep
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericError("function value non-finite during finite differences")
        numeric = (f_plus - f_minus) / (2.0 * eps)
        err = abs(aflat[i] - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
    return worst
