"""Dense float64 tensors with tape-free reverse-mode differentiation.

Every tensor produced by an operation keeps references to its parents and a
closure mapping the upstream gradient to one gradient per parent. Only
tensors that (transitively) depend on a ``requires_grad`` leaf record
parents, so frozen parameters never get gradient storage.

Arrays follow numpy broadcasting; the model code relies on leading batch
axes being carried through untouched.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError, HarnessError, NonFiniteError

DTYPE = np.float64

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (forward-only evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _all_finite(arr):
    # any NaN/Inf makes the sum non-finite; an overflowing sum of finite values
    # falls through to the exact elementwise test
    with np.errstate(over="ignore", invalid="ignore"):
        if np.isfinite(arr.sum()):
            return True
    return bool(np.isfinite(arr).all())


def _as_array(data):
    arr = np.asarray(data, dtype=DTYPE)
    if not np.isfinite(arr).all():
        raise NonFiniteError("non-finite value in tensor data")
    return arr


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = _as_array(data).copy()
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self.op = None
        self._parents = ()
        self._backward = None

    @classmethod
    def _from_op(cls, data, parents, backward, op):
        if not _all_finite(data):
            raise NonFiniteError(f"{op} produced a non-finite value")
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out.op = op
        track = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = parents if track else ()
        out._backward = backward if track else None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    # operator sugar
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return tmax(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)

    @property
    def T(self):
        return swapaxes(self, -1, -2)


def tensor(data, requires_grad=False, name=None):
    return Tensor(data, requires_grad=requires_grad, name=name)


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# elementwise binary ---------------------------------------------------------

def add(a, b):
    a, b = _lift(a), _lift(b)

    def back(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return Tensor._from_op(a.data + b.data, (a, b), back, "add")


def sub(a, b):
    a, b = _lift(a), _lift(b)

    def back(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return Tensor._from_op(a.data - b.data, (a, b), back, "sub")


def mul(a, b):
    a, b = _lift(a), _lift(b)

    def back(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return Tensor._from_op(a.data * b.data, (a, b), back, "mul")


def div(a, b):
    a, b = _lift(a), _lift(b)
    out = a.data / b.data

    def back(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(out, (a, b), back, "div")


def power(a, p):
    a = _lift(a)
    p = float(p)

    def back(g):
        return (g * p * a.data ** (p - 1.0),)

    return Tensor._from_op(a.data ** p, (a,), back, "pow")


def matmul(a, b):
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        # stacked rows times one weight matrix: a single 2-D GEMM
        a2 = a.data.reshape(-1, a.shape[-1])
        out = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))

        def back(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return Tensor._from_op(out, (a, b), back, "matmul")

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return Tensor._from_op(a.data @ b.data, (a, b), back, "matmul")


# elementwise unary ----------------------------------------------------------

def exp(a):
    with np.errstate(over="ignore"):  # overflow is reported by the finiteness check
        out = np.exp(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g / a.data,), "log")


def tanh(a):
    out = np.tanh(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a):
    mask = a.data > 0
    return Tensor._from_op(a.data * mask, (a,), lambda g: (g * mask,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a):
    """GELU, tanh approximation."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    half_1pt = 0.5 * (1.0 + t)
    out = x * half_1pt

    def back(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (half_1pt + 0.5 * x * (1.0 - t * t) * dinner),)

    return Tensor._from_op(out, (a,), back, "gelu")


# reductions -----------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims=False):
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._from_op(np.asarray(out), (a,), back, "sum")


def mean(a, axis=None, keepdims=False):
    axes = _norm_axes(axis, a.ndim)
    n = 1
    for ax in axes:
        n *= a.shape[ax]
    return tsum(a, axes, keepdims) * (1.0 / n)


def tmax(a, axis=None, keepdims=False):
    """Max over one axis (or everything). Gradient goes to the first maximiser."""
    if axis is None:
        flat = reshape(a, (a.size,))
        return tmax(flat, 0, keepdims=False) if not keepdims else reshape(
            tmax(flat, 0), (1,) * a.ndim)
    if not isinstance(axis, int):
        raise ContractError("tmax reduces over a single axis")
    axis %= a.ndim
    out = np.max(a.data, axis=axis, keepdims=True)

    def back(g):
        # argmax only when a gradient is needed; it also picks the first maximiser
        idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
        if not keepdims:
            g = np.expand_dims(g, axis)
        grad = np.zeros_like(a.data)
        np.put_along_axis(grad, idx, g, axis=axis)
        return (grad,)

    if not keepdims:
        out = np.squeeze(out, axis)
    return Tensor._from_op(out, (a,), back, "max")


# shape manipulation ---------------------------------------------------------

def reshape(a, shape):
    out = a.data.reshape(shape)
    return Tensor._from_op(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def swapaxes(a, i, j):
    out = np.swapaxes(a.data, i, j)
    return Tensor._from_op(out, (a,), lambda g: (np.swapaxes(g, i, j),), "swapaxes")


def broadcast_to(a, shape):
    a = _lift(a)
    out = np.broadcast_to(a.data, shape)
    return Tensor._from_op(out, (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast")


def _is_basic_index(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def getitem(a, idx):
    out = a.data[idx]
    basic = _is_basic_index(idx)

    def back(g):
        grad = np.zeros_like(a.data)
        if basic:
            grad[idx] += g
        else:
            np.add.at(grad, idx, g)
        return (grad,)

    return Tensor._from_op(np.array(out, dtype=DTYPE), (a,), back, "getitem")


def concat(tensors, axis=0):
    tensors = [_lift(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        parts = np.split(g, bounds, axis=axis)
        return tuple(p if t.requires_grad else None for p, t in zip(parts, tensors))

    return Tensor._from_op(out, tuple(tensors), back, "concat")


def stack(tensors, axis=0):
    tensors = [_lift(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def back(g):
        parts = np.moveaxis(g, axis, 0)
        return tuple(p.copy() if t.requires_grad else None for p, t in zip(parts, tensors))

    return Tensor._from_op(out, tuple(tensors), back, "stack")


# fused normalisation / probability ops --------------------------------------

def softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(out, (x,), back, "softmax")


def log_softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def back(g):
        p = np.exp(out)
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return Tensor._from_op(out, (x,), back, "log_softmax")


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalise the last axis to zero mean / unit population variance, then scale and shift."""
    gamma, beta = _lift(gamma), _lift(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def back(g):
        gx = gg = gb = None
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        if gamma.requires_grad:
            gg = _unbroadcast(g * xhat, gamma.shape)
        if beta.requires_grad:
            gb = _unbroadcast(g, beta.shape)
        return gx, gg, gb

    return Tensor._from_op(out, (x, gamma, beta), back, "layer_norm")


# backward -------------------------------------------------------------------

class Graph:
    """The recorded computation below a scalar output, in topological order.

    ``nodes`` holds every tensor that participates in differentiation,
    parents before children. ``leaves`` are the trainable parameters reached.
    """

    def __init__(self, output):
        self.output = output
        self.nodes = _topological(output)
        self.leaves = [n for n in self.nodes if n.is_leaf and n.requires_grad]
        self.visits = 0

    def backward(self, accumulate=False):
        out = self.output
        if out.size != 1:
            raise ContractError(f"backward needs a scalar output, got shape {out.shape}")
        grads = {id(out): np.ones_like(out.data)}
        result = {}
        self.visits = 0
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            self.visits += 1
            if g is None:
                continue
            if node.is_leaf:
                result[node] = g
                if accumulate and node.grad is not None:
                    node.grad = node.grad + g
                else:
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
        return result


def _topological(output):
    order = []
    if not output.requires_grad:
        return order
    seen = {id(output)}
    stack = [(output, iter(output._parents))]
    while stack:
        node, it = stack[-1]
        advanced = False
        for parent in it:
            if parent.requires_grad and id(parent) not in seen:
                seen.add(id(parent))
                stack.append((parent, iter(parent._parents)))
                advanced = True
                break
        if not advanced:
            stack.pop()
            order.append(node)
    return order


def backward(loss):
    """Gradients of scalar ``loss`` for every trainable leaf it depends on."""
    return Graph(loss).backward()


# finite-difference harness --------------------------------------------------

@dataclass
class GradCheckEntry:
    name: str
    index: tuple
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class GradCheckReport:
    tolerance: float
    entries: list = field(default_factory=list)

    @property
    def passed(self):
        return all(e.rel_err <= self.tolerance for e in self.entries)

    @property
    def max_rel_err(self):
        return max((e.rel_err for e in self.entries), default=0.0)

    def __str__(self):
        lines = [f"{'param':<32} {'index':<14} {'analytic':>14} {'numeric':>14} {'rel_err':>10}"]
        for e in self.entries:
            lines.append(f"{e.name:<32} {str(e.index):<14} {e.analytic:>14.6e} "
                         f"{e.numeric:>14.6e} {e.rel_err:>10.2e}")
        verdict = "PASS" if self.passed else "FAIL"
        lines.append(f"{verdict} max rel_err {self.max_rel_err:.3e} (tolerance {self.tolerance:g})")
        return "\n".join(lines)


def relative_error(a, n):
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def finite_diff_check(f, params, h=1e-5, tolerance=1e-4, coords=None, n_coords=None, seed=0):
    """Compare reverse-mode gradients of ``f()`` with central differences.

    ``params`` maps names to leaf tensors. Coordinates are either given as
    ``(name, index)`` pairs or ``n_coords`` are drawn uniformly over all
    parameter entries with a seeded generator.
    """
    params = dict(params)
    base = f()
    again = f()
    if base.data.tobytes() != again.data.tobytes():
        raise HarnessError("objective is not deterministic: two evaluations differ")
    for p in params.values():
        p.grad = None
    grads = Graph(base).backward()

    if coords is None:
        names = list(params)
        sizes = np.array([params[n].size for n in names])
        rng = np.random.default_rng(seed)
        total = int(sizes.sum())
        count = total if n_coords is None else min(n_coords, total)
        flat = rng.choice(total, size=count, replace=False)
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        coords = []
        for k in flat:
            j = int(np.searchsorted(offsets, k, side="right") - 1)
            coords.append((names[j], np.unravel_index(int(k - offsets[j]), params[names[j]].shape)))

    report = GradCheckReport(tolerance)
    for name, index in coords:
        p = params[name]
        index = tuple(int(i) for i in np.atleast_1d(index)) if p.ndim else ()
        g = grads.get(p)
        analytic = float(g[index]) if g is not None else 0.0
        orig = p.data[index]
        p.data[index] = orig + h
        fp = f().item()
        p.data[index] = orig - h
        fm = f().item()
        p.data[index] = orig
        numeric = (fp - fm) / (2 * h)
        report.entries.append(GradCheckEntry(name, index, analytic, numeric,
                                             relative_error(analytic, numeric)))
    return report
