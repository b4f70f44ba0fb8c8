"""Dense float64 autodiff with two independent modes.

Reverse mode: ``forward`` runs a primitive-composed callable while recording a
``Tape``; ``backward`` replays it in exact reverse order and accumulates
vector-Jacobian products into the inputs.

Forward mode: ``jvp`` pushes ``DualValue`` (primal, tangent) pairs through the
same primitives without creating a tape, so directional derivatives are
available for computations that must stay outside the gradient graph.

All values are float64 numpy arrays. Reductions are single numpy calls with a
fixed evaluation order, so identical inputs give bit-identical outputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "ShapeMismatchError",
    "NumericFaultError",
    "Tape",
    "Var",
    "DualValue",
    "forward",
    "backward",
    "jvp",
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "tanh",
    "sin",
    "cos",
    "sqrt",
    "square",
    "sum_",
    "mean_",
    "concat",
    "reshape",
]


class ShapeMismatchError(ValueError):
    """Operand shapes are incompatible; message names the offending node."""


class NumericFaultError(ArithmeticError):
    """A non-finite value appeared; message names the node that produced it."""


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` over axes that were broadcast to reach `grad.shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tape:
    """Ordered record of primitive ops from one traced evaluation.

    Nodes are appended in execution order, which for a define-by-run trace is
    a topological order; ``backward`` walks the reversed list.
    """

    def __init__(self, check_finite: bool = True):
        self.nodes: list[Var] = []
        self.inputs: list[Var] = []
        self.output: Var | None = None
        self.check_finite = check_finite

    def _record(self, value: np.ndarray, parents, op: str) -> "Var":
        name = f"{op}#{len(self.nodes)}"
        if self.check_finite and not np.all(np.isfinite(value)):
            raise NumericFaultError(f"non-finite value produced by node {name}")
        node = Var(value, self, name)
        node._parents = tuple(parents)
        self.nodes.append(node)
        return node


# Forward-mode checking is controlled per jvp() call via this module flag;
# evaluation is single-threaded per the one-owner-per-pass model.
_DUAL_CHECK = [False]


def _dual_guard(value: np.ndarray, op: str) -> np.ndarray:
    if _DUAL_CHECK[0] and not np.all(np.isfinite(value)):
        raise NumericFaultError(f"non-finite value produced by node {op}")
    return value


class Var:
    """Tape node: a value plus the local vjp closures of its parents."""

    __slots__ = ("value", "tape", "name", "grad", "_parents")
    __array_ufunc__ = None  # force ndarray <op> Var to defer to our reflected ops

    def __init__(self, value: np.ndarray, tape: Tape, name: str):
        self.value = _as_array(value)
        self.tape = tape
        self.name = name
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var({self.name}, shape={self.value.shape})"

    # -- binary arithmetic ------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, p):
        return square(self) if p == 2 else _pow_const(self, float(p))


@dataclass
class DualValue:
    """Primal-plus-tangent pair for forward-mode propagation."""

    primal: np.ndarray
    tangent: np.ndarray

    def __post_init__(self):
        self.primal = _as_array(self.primal)
        self.tangent = _as_array(self.tangent)
        if self.primal.shape != self.tangent.shape:
            raise ShapeMismatchError(
                f"tangent shape {self.tangent.shape} != primal shape {self.primal.shape}"
            )

    __array_ufunc__ = None

    @property
    def shape(self):
        return self.primal.shape

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, p):
        return square(self) if p == 2 else _pow_const(self, float(p))


def _tape_of(*args) -> Tape:
    for a in args:
        if isinstance(a, Var):
            return a.tape
    raise TypeError("no Var operand")


def _value(x):
    if isinstance(x, Var):
        return x.value
    if isinstance(x, DualValue):
        return x.primal
    return _as_array(x)


# ---------------------------------------------------------------------------
# primitives: each dispatches on Var (tape), DualValue (forward), or ndarray
# ---------------------------------------------------------------------------


def _fit_tangent(tan: np.ndarray, out_val: np.ndarray) -> np.ndarray:
    if tan.shape != out_val.shape:
        tan = np.broadcast_to(tan, out_val.shape).copy()
    return tan


def _bin_val(fn, av, bv, op: str, tape: Tape | None = None) -> np.ndarray:
    try:
        with np.errstate(all="ignore"):  # faults surface as NumericFaultError
            return fn(av, bv)
    except ValueError as e:
        node = f"{op}#{len(tape.nodes)}" if tape is not None else op
        raise ShapeMismatchError(f"{node}: {e}") from None


def add(a, b):
    if isinstance(a, Var) or isinstance(b, Var):
        tape = _tape_of(a, b)
        av, bv = _value(a), _value(b)
        return tape._record(
            _bin_val(np.add, av, bv, "add", tape),
            _vjp_pair(a, b, lambda g: _unbroadcast(g, av.shape), lambda g: _unbroadcast(g, bv.shape)),
            "add",
        )
    if isinstance(a, DualValue) or isinstance(b, DualValue):
        av, bv = _value(a), _value(b)
        out_val = _bin_val(np.add, av, bv, "add")
        if isinstance(a, DualValue) and isinstance(b, DualValue):
            tan = a.tangent + b.tangent
        elif isinstance(a, DualValue):
            tan = a.tangent
        else:
            tan = b.tangent
        return DualValue(_dual_guard(out_val, "add"), _fit_tangent(tan, out_val))
    return _as_array(a) + _as_array(b)


def sub(a, b):
    if isinstance(a, Var) or isinstance(b, Var):
        tape = _tape_of(a, b)
        av, bv = _value(a), _value(b)
        return tape._record(
            _bin_val(np.subtract, av, bv, "sub", tape),
            _vjp_pair(a, b, lambda g: _unbroadcast(g, av.shape), lambda g: _unbroadcast(-g, bv.shape)),
            "sub",
        )
    if isinstance(a, DualValue) or isinstance(b, DualValue):
        av, bv = _value(a), _value(b)
        out_val = _bin_val(np.subtract, av, bv, "sub")
        if isinstance(a, DualValue) and isinstance(b, DualValue):
            tan = a.tangent - b.tangent
        elif isinstance(a, DualValue):
            tan = a.tangent
        else:
            tan = -b.tangent
        return DualValue(_dual_guard(out_val, "sub"), _fit_tangent(tan, out_val))
    return _as_array(a) - _as_array(b)


def mul(a, b):
    if isinstance(a, Var) or isinstance(b, Var):
        tape = _tape_of(a, b)
        av, bv = _value(a), _value(b)
        return tape._record(
            _bin_val(np.multiply, av, bv, "mul", tape),
            _vjp_pair(a, b, lambda g: _unbroadcast(g * bv, av.shape), lambda g: _unbroadcast(g * av, bv.shape)),
            "mul",
        )
    if isinstance(a, DualValue) or isinstance(b, DualValue):
        av, bv = _value(a), _value(b)
        out_val = _bin_val(np.multiply, av, bv, "mul")
        if isinstance(a, DualValue) and isinstance(b, DualValue):
            tan = a.tangent * bv + av * b.tangent
        elif isinstance(a, DualValue):
            tan = a.tangent * bv
        else:
            tan = av * b.tangent
        return DualValue(_dual_guard(out_val, "mul"), _fit_tangent(tan, out_val))
    return _as_array(a) * _as_array(b)


def div(a, b):
    if isinstance(a, Var) or isinstance(b, Var):
        tape = _tape_of(a, b)
        av, bv = _value(a), _value(b)
        return tape._record(
            _bin_val(np.divide, av, bv, "div", tape),
            _vjp_pair(
                a,
                b,
                lambda g: _unbroadcast(g / bv, av.shape),
                lambda g: _unbroadcast(-g * av / (bv * bv), bv.shape),
            ),
            "div",
        )
    if isinstance(a, DualValue) or isinstance(b, DualValue):
        av, bv = _value(a), _value(b)
        out_val = _bin_val(np.divide, av, bv, "div")
        if isinstance(a, DualValue) and isinstance(b, DualValue):
            tan = (a.tangent * bv - av * b.tangent) / (bv * bv)
        elif isinstance(a, DualValue):
            tan = a.tangent / bv
        else:
            tan = -av * b.tangent / (bv * bv)
        return DualValue(_dual_guard(out_val, "div"), _fit_tangent(tan, out_val))
    return _as_array(a) / _as_array(b)


def matmul(a, b):
    if isinstance(a, Var) or isinstance(b, Var):
        tape = _tape_of(a, b)
        av, bv = _value(a), _value(b)
        try:
            out_val = av @ bv
        except ValueError as e:
            raise ShapeMismatchError(f"matmul#{len(tape.nodes)}: {e}") from None
        return tape._record(
            out_val,
            _vjp_pair(a, b, lambda g: g @ bv.T, lambda g: av.T @ g),
            "matmul",
        )
    if isinstance(a, DualValue) or isinstance(b, DualValue):
        av, bv = _value(a), _value(b)
        try:
            out_val = av @ bv
        except ValueError as e:
            raise ShapeMismatchError(f"matmul: {e}") from None
        if isinstance(a, DualValue) and isinstance(b, DualValue):
            tan = a.tangent @ bv + av @ b.tangent
        elif isinstance(a, DualValue):
            tan = a.tangent @ bv
        else:
            tan = av @ b.tangent
        return DualValue(_dual_guard(out_val, "matmul"), tan)
    return _as_array(a) @ _as_array(b)


def _unary(a, fn, dfn, op):
    """fn: value map; dfn(x_val, y_val) -> local derivative."""
    if isinstance(a, Var):
        av = a.value
        with np.errstate(all="ignore"):
            yv = fn(av)
        d = dfn(av, yv)
        return a.tape._record(yv, [(a, lambda g: g * d)], op)
    if isinstance(a, DualValue):
        with np.errstate(all="ignore"):
            yv = fn(a.primal)
        return DualValue(_dual_guard(yv, op), dfn(a.primal, yv) * a.tangent)
    return fn(_as_array(a))


def tanh(a):
    return _unary(a, np.tanh, lambda x, y: 1.0 - y * y, "tanh")


def sin(a):
    return _unary(a, np.sin, lambda x, y: np.cos(x), "sin")


def cos(a):
    return _unary(a, np.cos, lambda x, y: -np.sin(x), "cos")


def sqrt(a):
    return _unary(a, np.sqrt, lambda x, y: 0.5 / y, "sqrt")


def square(a):
    return mul(a, a)


def _pow_const(a, p: float):
    return _unary(a, lambda x: x**p, lambda x, y: p * x ** (p - 1.0), "pow")


def sum_(a, axis=None):
    """Sum over `axis` (None = all elements, returning a 0-d array)."""
    if isinstance(a, Var):
        av = a.value
        yv = np.sum(av, axis=axis)

        def vjp(g):
            if axis is None:
                return np.broadcast_to(g, av.shape).copy()
            gg = np.expand_dims(g, axis)
            return np.broadcast_to(gg, av.shape).copy()

        return a.tape._record(yv, [(a, vjp)], "sum")
    if isinstance(a, DualValue):
        return DualValue(
            _dual_guard(np.sum(a.primal, axis=axis), "sum"), np.sum(a.tangent, axis=axis)
        )
    return np.sum(_as_array(a), axis=axis)


def mean_(a, axis=None):
    n = _value(a).size if axis is None else _value(a).shape[axis]
    return mul(sum_(a, axis=axis), 1.0 / n)


def concat(items, axis=0):
    vals = [_value(x) for x in items]
    if any(isinstance(x, Var) for x in items):
        tape = _tape_of(*items)
        out_val = np.concatenate(vals, axis=axis)
        offsets = np.cumsum([0] + [v.shape[axis] for v in vals])
        parents = []
        for i, x in enumerate(items):
            if isinstance(x, Var):
                lo, hi = offsets[i], offsets[i + 1]

                def vjp(g, lo=lo, hi=hi):
                    sl = [slice(None)] * g.ndim
                    sl[axis] = slice(lo, hi)
                    return g[tuple(sl)]

                parents.append((x, vjp))
        return tape._record(out_val, parents, "concat")
    if any(isinstance(x, DualValue) for x in items):
        tans = [
            x.tangent if isinstance(x, DualValue) else np.zeros_like(v)
            for x, v in zip(items, vals)
        ]
        return DualValue(
            _dual_guard(np.concatenate(vals, axis=axis), "concat"),
            np.concatenate(tans, axis=axis),
        )
    return np.concatenate(vals, axis=axis)


def reshape(a, shape):
    if isinstance(a, Var):
        av = a.value
        return a.tape._record(av.reshape(shape), [(a, lambda g: g.reshape(av.shape))], "reshape")
    if isinstance(a, DualValue):
        return DualValue(a.primal.reshape(shape), a.tangent.reshape(shape))
    return _as_array(a).reshape(shape)


def _vjp_pair(a, b, vjp_a, vjp_b):
    parents = []
    if isinstance(a, Var):
        parents.append((a, vjp_a))
    if isinstance(b, Var):
        parents.append((b, vjp_b))
    return parents


# ---------------------------------------------------------------------------
# driver entry points
# ---------------------------------------------------------------------------


def forward(fn, inputs, check_finite: bool = True):
    """Trace `fn` over `inputs`, recording every primitive on a fresh tape.

    Returns ``(output, tape)`` where output is the Var produced by `fn`.
    Every entry of `inputs` is wrapped as a differentiable leaf.
    """
    tape = Tape(check_finite=check_finite)
    leaves = []
    for i, x in enumerate(inputs):
        v = Var(x, tape, f"input#{i}")
        tape.inputs.append(v)
        leaves.append(v)
    out = fn(*leaves)
    if not isinstance(out, Var):
        raise TypeError("traced function must return a Var built from its inputs")
    tape.output = out
    return out, tape


def backward(tape: Tape, seed: np.ndarray):
    """Reverse-accumulate d(seed . output)/d(input) for every input leaf."""
    if tape.output is None:
        raise RuntimeError("tape has no recorded output")
    seed = _as_array(seed)
    if seed.shape != tape.output.value.shape:
        raise ShapeMismatchError(
            f"seed shape {seed.shape} != output shape {tape.output.value.shape}"
        )
    for node in tape.nodes:
        node.grad = None
    for node in tape.inputs:
        node.grad = None
    tape.output.grad = seed
    for node in reversed(tape.nodes):
        if node.grad is None:
            continue
        for parent, vjp in node._parents:
            g = vjp(node.grad)
            parent.grad = g if parent.grad is None else parent.grad + g
    return [
        v.grad if v.grad is not None else np.zeros_like(v.value) for v in tape.inputs
    ]


def jvp(fn, inputs: list[DualValue], check_finite: bool = True) -> DualValue:
    """Forward-propagate dual numbers through `fn`; no tape is created.

    The returned primal equals a plain evaluation of `fn`; the tangent is the
    directional derivative along the input tangents.
    """
    prev = _DUAL_CHECK[0]
    _DUAL_CHECK[0] = check_finite
    try:
        out = fn(*inputs)
    finally:
        _DUAL_CHECK[0] = prev
    if not isinstance(out, DualValue):
        out = DualValue(_value(out), np.zeros_like(_value(out)))
    return out
