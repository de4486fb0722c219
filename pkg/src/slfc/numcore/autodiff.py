"""Reverse-mode automatic differentiation on numpy arrays.

A :class:`Tape` records every primitive applied to a :class:`Var` together
with a closure mapping the output cotangent to input cotangents.  Because
nodes are appended in evaluation order, the recording order is a
topological order and :meth:`Tape.backward` only has to walk it in reverse.

The primitive functions in this module are polymorphic: called on plain
arrays they return plain arrays, called with at least one ``Var`` they
record a node.  Model code is therefore written once and used both for
training (with leaves on a tape) and for fast inference (with arrays).

Examples
--------
>>> tape = Tape()
>>> x = tape.leaf(np.array(3.0), "x")
>>> grads = tape.backward(x * x)
>>> float(grads["x"])
6.0
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import ContractError, ShapeError

__all__ = [
    "Tape",
    "Var",
    "value_of",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "power",
    "matmul",
    "einsum",
    "exp",
    "log",
    "tanh",
    "softplus",
    "sqrt",
    "square",
    "sum",
    "mean",
    "logsumexp",
    "reshape",
    "transpose",
    "take",
    "concatenate",
    "where",
    "linear",
    "gauss_logpdf",
    "kl_gauss",
    "numeric_grad",
]


class Var:
    """A value recorded on a tape."""

    __slots__ = ("value", "tape", "parents", "backward_fn", "name")
    __array_priority__ = 1000  # make ndarray <op> Var dispatch to Var

    def __init__(self, value, tape, parents=(), backward_fn=None, name=None):
        self.value = value
        self.tape = tape
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name

    @property
    def shape(self):
        return np.shape(self.value)

    @property
    def ndim(self):
        return np.ndim(self.value)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Var{label}(shape={self.shape})"

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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)


class Tape:
    """Record of a differentiable computation.

    Leaves registered with :meth:`leaf` are the parameters gradients are
    reported for.  A tape is single-owner; do not share one across threads.
    """

    def __init__(self):
        self.nodes: list[Var] = []
        self.leaves: dict[str, Var] = {}

    def leaf(self, value, name: str) -> Var:
        if name in self.leaves:
            raise ContractError(f"leaf {name!r} registered twice")
        var = Var(np.asarray(value, dtype=np.float64), self, name=name)
        self.leaves[name] = var
        return var

    def leaves_from(self, arrays: dict) -> dict:
        """Register every array of a mapping as a leaf, keyed by its name."""
        return {k: self.leaf(v, k) for k, v in arrays.items()}

    def _record(self, value, parents, backward_fn) -> Var:
        var = Var(value, self, parents, backward_fn)
        self.nodes.append(var)
        return var

    def backward(self, loss: Var) -> dict[str, np.ndarray]:
        """Gradients of a scalar ``loss`` with respect to every leaf."""
        if not isinstance(loss, Var) or loss.tape is not self:
            raise ContractError("loss is not a node on this tape")
        if np.size(loss.value) != 1:
            raise ContractError(f"loss must be scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None or node.backward_fn is None:
                if g is not None:
                    grads[id(node)] = g
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not isinstance(parent, Var):
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        out = {}
        for name, var in self.leaves.items():
            g = grads.get(id(var))
            out[name] = np.zeros_like(var.value) if g is None else np.asarray(g).reshape(var.shape)
        return out


def value_of(x):
    """Underlying array of a Var, or ``x`` itself."""
    return x.value if isinstance(x, Var) else x


def _tape_of(*args):
    for a in args:
        if isinstance(a, Var):
            return a.tape
    return None


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    g = np.asarray(g)
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _binary(fn, grad_fn):
    def op(a, b):
        av, bv = value_of(a), value_of(b)
        out = fn(av, bv)
        tape = _tape_of(a, b)
        if tape is None:
            return out
        sa, sb = np.shape(av), np.shape(bv)

        def backward(g):
            ga, gb = grad_fn(g, av, bv, out)
            return (
                _unbroadcast(ga, sa) if isinstance(a, Var) else None,
                _unbroadcast(gb, sb) if isinstance(b, Var) else None,
            )

        return tape._record(out, (a, b), backward)

    return op


def _unary(fn, grad_fn):
    def op(x):
        xv = value_of(x)
        out = fn(xv)
        if not isinstance(x, Var):
            return out
        return x.tape._record(out, (x,), lambda g: (grad_fn(g, xv, out),))

    return op


add = _binary(np.add, lambda g, a, b, out: (g, g))
sub = _binary(np.subtract, lambda g, a, b, out: (g, -g))
mul = _binary(np.multiply, lambda g, a, b, out: (g * b, g * a))
div = _binary(np.divide, lambda g, a, b, out: (g / b, -g * a / (b * b)))

neg = _unary(np.negative, lambda g, x, out: -g)
exp = _unary(np.exp, lambda g, x, out: g * out)
log = _unary(np.log, lambda g, x, out: g / x)
tanh = _unary(np.tanh, lambda g, x, out: g * (1.0 - out * out))
sqrt = _unary(np.sqrt, lambda g, x, out: g * 0.5 / out)
square = _unary(np.square, lambda g, x, out: g * 2.0 * x)


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


softplus = _unary(_softplus, lambda g, x, out: g * _sigmoid(x))


def power(x, exponent: float):
    xv = value_of(x)
    out = np.power(xv, exponent)
    if not isinstance(x, Var):
        return out
    return x.tape._record(out, (x,), lambda g: (g * exponent * np.power(xv, exponent - 1),))


def matmul(a, b):
    av, bv = value_of(a), value_of(b)
    out = av @ bv
    tape = _tape_of(a, b)
    if tape is None:
        return out

    def backward(g):
        ga = gb = None
        if isinstance(a, Var):
            ga = g @ np.swapaxes(bv, -1, -2) if bv.ndim > 1 else np.multiply.outer(g, bv)
            ga = _unbroadcast(ga, av.shape)
        if isinstance(b, Var):
            if av.ndim == 1:
                gb = np.multiply.outer(av, g)
            else:
                gb = np.swapaxes(av, -1, -2) @ g
            gb = _unbroadcast(gb, bv.shape)
        return ga, gb

    return tape._record(out, (a, b), backward)


def einsum(subscripts: str, a, b):
    """Two-operand einsum with explicit output, e.g. ``"cas,bcs->bca"``.

    Every index of an operand must appear in the other operand or in the
    output; indices summed over a single operand are not supported.
    """
    lhs, out_sub = subscripts.replace(" ", "").split("->")
    sa, sb = lhs.split(",")
    for own, other in ((sa, sb), (sb, sa)):
        missing = set(own) - set(other) - set(out_sub)
        if missing:
            raise ShapeError(f"einsum index {sorted(missing)} summed within one operand")
    av, bv = value_of(a), value_of(b)
    out = np.einsum(subscripts, av, bv)
    tape = _tape_of(a, b)
    if tape is None:
        return out

    def backward(g):
        ga = np.einsum(f"{out_sub},{sb}->{sa}", g, bv) if isinstance(a, Var) else None
        gb = np.einsum(f"{out_sub},{sa}->{sb}", g, av) if isinstance(b, Var) else None
        return ga, gb

    return tape._record(out, (a, b), backward)


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy name
    xv = value_of(x)
    out = np.sum(xv, axis=axis, keepdims=keepdims)
    if not isinstance(x, Var):
        return out
    shape = xv.shape
    return x.tape._record(out, (x,), lambda g: (_expand_reduced(g, shape, axis, keepdims),))


def mean(x, axis=None, keepdims=False):
    xv = value_of(x)
    n = xv.size if axis is None else np.prod([xv.shape[a] for a in np.atleast_1d(axis)])
    return div(sum(x, axis=axis, keepdims=keepdims), float(n))


def logsumexp(x, axis=-1, keepdims=False):
    """Overflow-safe ``log(sum(exp(x)))`` along ``axis``."""
    xv = value_of(x)
    m = np.max(xv, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = np.log(np.sum(np.exp(xv - m), axis=axis, keepdims=True)) + m
    out = s if keepdims else np.squeeze(s, axis=axis)
    if not isinstance(x, Var):
        return out

    def backward(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        with np.errstate(invalid="ignore"):
            w = np.exp(xv - s)
        return (gk * np.nan_to_num(w),)

    return x.tape._record(out, (x,), backward)


def reshape(x, shape):
    xv = value_of(x)
    out = np.reshape(xv, shape)
    if not isinstance(x, Var):
        return out
    orig = xv.shape
    return x.tape._record(out, (x,), lambda g: (np.reshape(g, orig),))


def transpose(x, axes=None):
    xv = value_of(x)
    out = np.transpose(xv, axes)
    if not isinstance(x, Var):
        return out
    inv = None if axes is None else np.argsort(axes)
    return x.tape._record(out, (x,), lambda g: (np.transpose(g, inv),))


def take(x, index):
    """Basic or advanced indexing ``x[index]``; repeated indices accumulate."""
    xv = value_of(x)
    out = xv[index]
    if not isinstance(x, Var):
        return out

    def backward(g):
        gx = np.zeros_like(xv)
        np.add.at(gx, index, g)
        return (gx,)

    return x.tape._record(out, (x,), backward)


def concatenate(xs: Sequence, axis=-1):
    values = [value_of(x) for x in xs]
    out = np.concatenate(values, axis=axis)
    tape = _tape_of(*xs)
    if tape is None:
        return out
    bounds = np.cumsum([v.shape[axis] for v in values])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return tape._record(out, tuple(xs), backward)


def where(cond, a, b):
    """Elementwise select with a constant boolean mask; no gradient to the unselected side."""
    cond = np.asarray(cond, dtype=bool)
    av, bv = value_of(a), value_of(b)
    out = np.where(cond, av, bv)
    tape = _tape_of(a, b)
    if tape is None:
        return out
    sa, sb = np.shape(av), np.shape(bv)

    def backward(g):
        return (
            _unbroadcast(np.where(cond, g, 0.0), sa) if isinstance(a, Var) else None,
            _unbroadcast(np.where(cond, 0.0, g), sb) if isinstance(b, Var) else None,
        )

    return tape._record(out, (a, b), backward)


def linear(x, W, b):
    """Fused affine map ``x @ W + b`` for a ``(B, n)`` batch."""
    xv, Wv, bv = value_of(x), value_of(W), value_of(b)
    out = xv @ Wv + bv
    tape = _tape_of(x, W, b)
    if tape is None:
        return out

    def backward(g):
        return (
            g @ Wv.T if isinstance(x, Var) else None,
            xv.T @ g if isinstance(W, Var) else None,
            g.sum(axis=0) if isinstance(b, Var) else None,
        )

    return tape._record(out, (x, W, b), backward)


_LOG_2PI = float(np.log(2.0 * np.pi))


def gauss_logpdf(x, mean, var):
    """Diagonal Gaussian log-density summed over the last axis (inputs broadcast)."""
    xv, mv, vv = value_of(x), value_of(mean), value_of(var)
    diff = xv - mv
    out = np.sum(-0.5 * (_LOG_2PI + np.log(vv)) - 0.5 * diff * diff / vv, axis=-1)
    tape = _tape_of(x, mean, var)
    if tape is None:
        return out

    def backward(g):
        gk = np.expand_dims(g, -1)
        r = diff / vv
        gx = -gk * r
        return (
            _unbroadcast(gx, np.shape(xv)) if isinstance(x, Var) else None,
            _unbroadcast(-gx, np.shape(mv)) if isinstance(mean, Var) else None,
            _unbroadcast(gk * (0.5 * r * r - 0.5 / vv), np.shape(vv)) if isinstance(var, Var) else None,
        )

    return tape._record(out, (x, mean, var), backward)


def kl_gauss(q_mean, q_var, p_mean, p_var):
    """KL between diagonal Gaussians summed over the last axis (inputs broadcast)."""
    qm, qv, pm, pv = (value_of(a) for a in (q_mean, q_var, p_mean, p_var))
    diff = qm - pm
    out = np.sum(0.5 * (qv / pv + diff * diff / pv - 1.0 - np.log(qv / pv)), axis=-1)
    tape = _tape_of(q_mean, q_var, p_mean, p_var)
    if tape is None:
        return out

    def backward(g):
        gk = np.expand_dims(g, -1)
        gqm = gk * diff / pv
        grads = (
            gqm,
            gk * 0.5 * (1.0 / pv - 1.0 / qv),
            -gqm,
            gk * 0.5 * (1.0 / pv - (qv + diff * diff) / (pv * pv)),
        )
        return tuple(
            _unbroadcast(gr, np.shape(val)) if isinstance(arg, Var) else None
            for gr, val, arg in zip(grads, (qm, qv, pm, pv), (q_mean, q_var, p_mean, p_var))
        )

    return tape._record(out, (q_mean, q_var, p_mean, p_var), backward)


def numeric_grad(
    f: Callable[[dict], float],
    arrays: dict[str, np.ndarray],
    eps: float = 1e-5,
    names: Iterable[str] | None = None,
) -> dict[str, np.ndarray]:
    """Central finite-difference gradient of ``f`` at ``arrays``.

    ``f`` receives a dict of arrays and must return a float.  Arrays are
    perturbed in place one entry at a time and restored afterwards.
    """
    work = {k: np.array(v, dtype=np.float64) for k, v in arrays.items()}
    out = {}
    for name in names if names is not None else work:
        arr = work[name]
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f(work)
            flat[i] = orig - eps
            lo = f(work)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * eps)
        out[name] = g
    return out
