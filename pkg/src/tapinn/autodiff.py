"""Tape-based reverse mode plus second-order Taylor jets along time.

Two layers cooperate here:

* :class:`Tape` / :class:`Var` record array operations in creation order and
  replay them backwards to produce exact parameter gradients.
* :class:`DualScalar` carries ``(value, d1, d2)`` of a quantity with respect to
  a single seeded scalar (the generator's time input).  Its components may be
  plain arrays or tape variables, so derivatives in ``t`` computed by the jet
  are themselves differentiable w.r.t. parameters (forward-over-reverse).

Every op accepts ``ndarray``, python scalars or :class:`Var`.  When no input is
a :class:`Var` the op evaluates eagerly with numpy and records nothing, which
keeps evaluation-only passes cheap.
"""
from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import NonFiniteError

__all__ = [
    "Tape",
    "Var",
    "DualScalar",
    "grad",
    "time_derivatives",
    "value_of",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "power",
    "tanh",
    "sigmoid",
    "cos",
    "sin",
    "sqrt",
    "relu",
    "sum",
    "mean",
    "matmul",
    "linear",
    "concat",
    "reshape",
    "take",
]


class Var:
    """A node on a :class:`Tape`."""

    __slots__ = ("value", "grad", "parents", "vjp", "tape")
    __array_ufunc__ = None  # make ndarray <op> Var dispatch to Var's reflected ops

    def __init__(self, value, tape: "Tape", parents: tuple = (), vjp: Callable | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.vjp = vjp
        self.tape = tape
        tape.nodes.append(self)

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        return f"Var(shape={self.value.shape})"

    def __add__(self, o):
        if isinstance(o, DualScalar):
            return NotImplemented
        return add(self, o)

    def __radd__(self, o):
        if isinstance(o, DualScalar):
            return NotImplemented
        return add(o, self)

    def __sub__(self, o):
        if isinstance(o, DualScalar):
            return NotImplemented
        return sub(self, o)

    def __rsub__(self, o):
        if isinstance(o, DualScalar):
            return NotImplemented
        return sub(o, self)

    def __mul__(self, o):
        if isinstance(o, DualScalar):
            return NotImplemented
        return mul(self, o)

    def __rmul__(self, o):
        if isinstance(o, DualScalar):
            return NotImplemented
        return mul(o, self)

    def __truediv__(self, o):
        if isinstance(o, DualScalar):
            return NotImplemented
        return div(self, o)

    def __rtruediv__(self, o):
        if isinstance(o, DualScalar):
            return NotImplemented
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, n: int):
        return power(self, n)

    def __matmul__(self, o):
        if isinstance(o, DualScalar):
            return NotImplemented
        return matmul(self, o)

    def __rmatmul__(self, o):
        if isinstance(o, DualScalar):
            return NotImplemented
        return matmul(o, self)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)


class Tape:
    """Ordered record of operations; rebuilt for every loss evaluation."""

    def __init__(self) -> None:
        self.nodes: list[Var] = []

    def watch(self, array) -> Var:
        """Register ``array`` as a differentiable leaf."""
        return Var(np.array(array, dtype=np.float64), self)

    def release(self) -> None:
        """Drop the recorded graph; nodes and tape reference each other, so
        without this each step's arrays wait for a full cyclic GC pass."""
        for node in self.nodes:
            node.parents = ()
            node.vjp = None
            node.grad = None
        self.nodes.clear()

    def backward(self, out: Var) -> None:
        if out.value.size != 1:
            raise ValueError("backward requires a scalar output")
        for node in self.nodes:
            node.grad = None
        out.grad = np.ones_like(out.value)
        for node in reversed(self.nodes):
            if node.grad is None or node.vjp is None:
                continue
            for parent, g in zip(node.parents, node.vjp(node.grad)):
                if g is None or not isinstance(parent, Var):
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g


def value_of(x):
    """Underlying numeric value of ``x`` (arrays and scalars pass through)."""
    if isinstance(x, Var):
        return x.value
    if isinstance(x, DualScalar):
        return x.map(value_of)
    return x


def _tape_of(*xs) -> Tape | None:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _shape(x) -> tuple:
    return np.shape(value_of(x))


def _record(value, parents: tuple, vjp: Callable):
    tape = _tape_of(*parents)
    if tape is None:
        return value
    return Var(value, tape, parents, vjp)


# -- elementwise arithmetic -------------------------------------------------

def add(a, b):
    av, bv = value_of(a), value_of(b)
    sa, sb = _shape(a), _shape(b)
    return _record(av + bv, (a, b), lambda g: (
        _unbroadcast(g, sa) if isinstance(a, Var) else None,
        _unbroadcast(g, sb) if isinstance(b, Var) else None,
    ))


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    sa, sb = _shape(a), _shape(b)
    return _record(av - bv, (a, b), lambda g: (
        _unbroadcast(g, sa) if isinstance(a, Var) else None,
        -_unbroadcast(g, sb) if isinstance(b, Var) else None,
    ))


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    sa, sb = _shape(a), _shape(b)
    return _record(av * bv, (a, b), lambda g: (
        _unbroadcast(g * bv, sa) if isinstance(a, Var) else None,
        _unbroadcast(g * av, sb) if isinstance(b, Var) else None,
    ))


def div(a, b):
    av, bv = value_of(a), value_of(b)
    sa, sb = _shape(a), _shape(b)
    out = av / bv
    return _record(out, (a, b), lambda g: (
        _unbroadcast(g / bv, sa) if isinstance(a, Var) else None,
        _unbroadcast(-g * out / bv, sb) if isinstance(b, Var) else None,
    ))


def neg(a):
    return _record(-value_of(a), (a,), lambda g: (-g,))


def power(a, n: int):
    """``a**n`` for an integer exponent."""
    if int(n) != n:
        raise ValueError("power() takes an integer exponent")
    n = int(n)
    av = value_of(a)
    if n == 0:
        return _record(np.ones_like(av), (a,), lambda g: (np.zeros_like(av),))
    return _record(av**n, (a,), lambda g: (g * n * av ** (n - 1),))


def tanh(a):
    if isinstance(a, DualScalar):
        return a.tanh()
    y = np.tanh(value_of(a))
    return _record(y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a):
    if isinstance(a, DualScalar):
        return a.sigmoid()
    av = value_of(a)
    y = 0.5 * (1.0 + np.tanh(0.5 * av))  # overflow-free logistic
    return _record(y, (a,), lambda g: (g * y * (1.0 - y),))


def cos(a):
    if isinstance(a, DualScalar):
        return a.cos()
    av = value_of(a)
    return _record(np.cos(av), (a,), lambda g: (-g * np.sin(av),))


def sin(a):
    if isinstance(a, DualScalar):
        return a.sin()
    av = value_of(a)
    return _record(np.sin(av), (a,), lambda g: (g * np.cos(av),))


def sqrt(a):
    """Square root whose derivative at exactly 0 is taken as 0."""
    av = value_of(a)
    y = np.sqrt(av)

    def vjp(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(y > 0.0, 0.5 / y, 0.0)
        return (g * d,)

    return _record(y, (a,), vjp)


def relu(a):
    """``max(0, a)``; derivative at 0 is 0."""
    av = value_of(a)
    return _record(np.maximum(av, 0.0), (a,), lambda g: (g * (av > 0.0),))


# -- reductions and structure ----------------------------------------------

def sum(a, axis=None, keepdims: bool = False):  # noqa: A001 - mirrors numpy
    av = value_of(a)
    shape = av.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(np.sum(av, axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a, axis=None, keepdims: bool = False):
    av = np.asarray(value_of(a))
    n = av.size if axis is None else np.prod([av.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def matmul(a, b):
    av, bv = value_of(a), value_of(b)
    sa, sb = np.shape(av), np.shape(bv)

    def vjp(g):
        ga = gb = None
        if isinstance(a, Var):
            ga = g @ np.swapaxes(bv, -1, -2) if bv.ndim > 1 else np.multiply.outer(g, bv)
            ga = _unbroadcast(ga, sa)
        if isinstance(b, Var):
            if av.ndim == 1:
                gb = np.multiply.outer(av, g)
            else:
                gb = np.swapaxes(av, -1, -2) @ g
            gb = _unbroadcast(gb, sb)
        return ga, gb

    return _record(av @ bv, (a, b), vjp)


def take(a, idx):
    """Basic or fancy indexing, ``a[idx]``."""
    av = value_of(a)
    parts = idx if isinstance(idx, tuple) else (idx,)
    fancy = any(isinstance(p, (np.ndarray, list)) for p in parts)

    def vjp(g):
        out = np.zeros_like(av)
        if fancy:
            np.add.at(out, idx, g)  # repeated indices must accumulate
        else:
            out[idx] = g
        return (out,)

    return _record(av[idx], (a,), vjp)


def reshape(a, shape):
    if isinstance(a, DualScalar):
        return a.map(lambda c: c if np.ndim(value_of(c)) == 0 else reshape(a._full(c), shape))
    av = value_of(a)
    return _record(av.reshape(shape), (a,), lambda g: (g.reshape(av.shape),))


def concat(parts: Sequence, axis: int = -1):
    vals = [value_of(p) for p in parts]
    sizes = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def vjp(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _record(np.concatenate(vals, axis=axis), tuple(parts), vjp)


def linear(x, weight, bias=None):
    """Affine map ``x @ weight + bias``; jets map each Taylor component."""
    if isinstance(x, DualScalar):
        value = matmul(x.value, weight)
        if bias is not None:
            value = add(value, bias)
        return DualScalar(value, _jmap(lambda c: matmul(c, weight), x.d1),
                          _jmap(lambda c: matmul(c, weight), x.d2))
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


# -- second-order jets ------------------------------------------------------

ZERO = 0.0  # structural zero for jet components; skipped by the helpers below


def _is_zero(x) -> bool:
    return x is ZERO


def _jadd(a, b):
    if _is_zero(a):
        return b
    if _is_zero(b):
        return a
    return add(a, b)


def _jsub(a, b):
    if _is_zero(b):
        return a
    if _is_zero(a):
        return neg(b)
    return sub(a, b)


def _jmul(a, b):
    if _is_zero(a) or _is_zero(b):
        return ZERO
    return mul(a, b)


def _jmap(fn, c):
    return ZERO if _is_zero(c) else fn(c)


def _lift(x) -> "DualScalar":
    if isinstance(x, DualScalar):
        return x
    return DualScalar(x, ZERO, ZERO)


class DualScalar:
    """Truncated Taylor jet ``(value, d/dt, d2/dt2)`` w.r.t. one seed.

    Components are elementwise: an array-valued jet is a batch of independent
    scalars sharing the same seed, not a tensor derivative.  Derivative
    components broadcast against ``value``; the module constant ``ZERO`` marks
    an identically-zero component and lets the arithmetic skip work.
    """

    __slots__ = ("value", "d1", "d2")
    __array_ufunc__ = None

    def __init__(self, value, d1=ZERO, d2=ZERO):
        self.value = value
        self.d1 = d1
        self.d2 = d2

    @classmethod
    def seed(cls, t) -> "DualScalar":
        """``(t, 1, 0)``: the jet of the independent variable itself."""
        return cls(np.asarray(t, dtype=np.float64), 1.0, ZERO)

    @classmethod
    def constant(cls, c) -> "DualScalar":
        return _lift(c)

    def map(self, fn: Callable) -> "DualScalar":
        return DualScalar(fn(self.value), _jmap(fn, self.d1), _jmap(fn, self.d2))

    def components(self) -> tuple:
        """``(value, d1, d2)`` with derivative components broadcast to full arrays."""
        v = value_of(self.value)
        shape = np.shape(v)
        out = [self.value]
        for c in (self.d1, self.d2):
            if _is_zero(c):
                out.append(np.zeros(shape))
            elif np.shape(value_of(c)) != shape:
                out.append(add(c, np.zeros(shape)))
            else:
                out.append(c)
        return tuple(out)

    @property
    def shape(self) -> tuple:
        return _shape(self.value)

    def __repr__(self) -> str:
        return f"DualScalar({value_of(self.value)!r}, {value_of(self.d1)!r}, {value_of(self.d2)!r})"

    def __add__(self, o):
        o = _lift(o)
        return DualScalar(add(self.value, o.value), _jadd(self.d1, o.d1), _jadd(self.d2, o.d2))

    __radd__ = __add__

    def __sub__(self, o):
        o = _lift(o)
        return DualScalar(sub(self.value, o.value), _jsub(self.d1, o.d1), _jsub(self.d2, o.d2))

    def __rsub__(self, o):
        return _lift(o) - self

    def __neg__(self):
        return DualScalar(neg(self.value), _jmap(neg, self.d1), _jmap(neg, self.d2))

    def __mul__(self, o):
        if not isinstance(o, DualScalar):
            return DualScalar(mul(self.value, o), _jmul(self.d1, o), _jmul(self.d2, o))
        d2 = _jadd(_jadd(_jmul(self.d2, o.value), _jmul(_jmul(self.d1, o.d1), 2.0)),
                   _jmul(self.value, o.d2))
        return DualScalar(
            mul(self.value, o.value),
            _jadd(_jmul(self.d1, o.value), _jmul(self.value, o.d1)),
            d2,
        )

    __rmul__ = __mul__

    def __truediv__(self, o):
        if not isinstance(o, DualScalar):
            return DualScalar(div(self.value, o), _jmap(lambda c: div(c, o), self.d1),
                              _jmap(lambda c: div(c, o), self.d2))
        q = div(self.value, o.value)
        q1 = _jmap(lambda c: div(c, o.value), _jsub(self.d1, _jmul(q, o.d1)))
        q2 = _jsub(_jsub(self.d2, _jmul(_jmul(q1, o.d1), 2.0)), _jmul(q, o.d2))
        q2 = _jmap(lambda c: div(c, o.value), q2)
        return DualScalar(q, q1, q2)

    def __rtruediv__(self, o):
        return _lift(o) / self

    def __pow__(self, n: int):
        n = int(n)
        if n == 0:
            return _lift(np.ones(self.shape))
        if n == 1:
            return self
        p1 = power(self.value, n - 1)
        slope = mul(p1, float(n))
        curv = mul(power(self.value, n - 2), float(n * (n - 1)))
        return self._chain(mul(p1, self.value), slope, curv)

    def _full(self, c):
        shape = self.shape
        return c if np.shape(value_of(c)) == shape else add(c, np.zeros(shape))

    def __getitem__(self, idx):
        return self.map(lambda c: c if np.ndim(value_of(c)) == 0 else take(self._full(c), idx))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)

    def _chain(self, y, slope, curv) -> "DualScalar":
        # f(u): d1 = f'(u) u', d2 = f'(u) u'' + f''(u) u'^2
        d1 = _jmul(slope, self.d1)
        d2 = _jadd(_jmul(slope, self.d2), _jmul(curv, _jmap(lambda c: power(c, 2), self.d1)))
        return DualScalar(y, d1, d2)

    def tanh(self) -> "DualScalar":
        y = tanh(self.value)
        slope = sub(1.0, power(y, 2))
        curv = mul(mul(y, slope), -2.0)
        return self._chain(y, slope, curv)

    def sigmoid(self) -> "DualScalar":
        y = sigmoid(self.value)
        slope = mul(y, sub(1.0, y))
        curv = mul(slope, sub(1.0, mul(y, 2.0)))
        return self._chain(y, slope, curv)

    def cos(self) -> "DualScalar":
        c = cos(self.value)
        s = sin(self.value)
        return self._chain(c, neg(s), neg(c))

    def sin(self) -> "DualScalar":
        s = sin(self.value)
        c = cos(self.value)
        return self._chain(s, c, neg(s))


# -- drivers ----------------------------------------------------------------

def _check_finite(name: str, arr) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains NaN/Inf")


def grad(loss_fn: Callable[[Mapping[str, Var]], Var], params: Mapping[str, np.ndarray],
         wrt: Iterable[str] | None = None):
    """Loss value and exact reverse-mode gradient of ``loss_fn`` at ``params``.

    ``loss_fn`` receives a mapping with the same keys as ``params``; entries
    named in ``wrt`` (default: all) are tape variables, the rest plain arrays.
    Returns ``(loss, {name: gradient})`` with gradients for ``wrt`` only, in
    ``params`` order.
    """
    names = list(params) if wrt is None else [k for k in params if k in set(wrt)]
    tape = Tape()
    try:
        leaves = {k: tape.watch(params[k]) for k in names}
        inputs = {k: leaves.get(k, params[k]) for k in params}
        out = loss_fn(inputs)
        if not isinstance(out, Var):
            loss = float(np.asarray(out))
            _check_finite("loss", loss)
            return loss, {k: np.zeros_like(np.asarray(params[k], dtype=np.float64)) for k in names}
        loss = float(out.value.reshape(()))
        _check_finite("loss", loss)
        tape.backward(out)
        grads = {}
        for k in names:
            g = leaves[k].grad
            g = np.zeros_like(leaves[k].value) if g is None else g
            _check_finite(f"gradient[{k}]", g)
            grads[k] = g
        return loss, grads
    finally:
        tape.release()


def time_derivatives(generator: Callable, z, t):
    """``(x, dx/dt, d2x/dt2)`` of ``generator(t, z)`` at ``t``.

    ``t`` is seeded as ``DualScalar(t, 1, 0)``; if the generator's parameters
    are tape variables the three results are too, so any function of them can
    be differentiated by :func:`grad`.
    """
    out = generator(DualScalar.seed(t), z)
    if not isinstance(out, DualScalar):
        out = _lift(out)
    comps = out.components()
    for name, comp in zip(("x", "x_dot", "x_ddot"), comps):
        _check_finite(name, value_of(comp))
    return comps
