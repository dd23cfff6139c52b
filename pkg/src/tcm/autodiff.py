"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tape` records every primitive applied to its nodes (define-by-run)
and replays the records in reverse to accumulate gradients.  Values are plain
``numpy.ndarray`` objects in float64; nodes are immutable once created.

Only the primitives needed by the consistency-model code exist here.  Shapes
must match exactly, except that a 0-d (scalar) operand may be combined with any
array.  Row-wise operations (bias add, per-row scaling, row sums, row splices)
are separate primitives so that their gradient rules stay explicit.

>>> tape = Tape()
>>> p = tape.param([1.0, 2.0], name="p")
>>> loss = sum_all(p * p)
>>> tape.backward(loss)[p]
array([2., 4.])
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "DomainError",
    "Node",
    "Tape",
    "add",
    "add_bias",
    "concat",
    "grad_check",
    "matmul",
    "mean",
    "mul",
    "mul_rows",
    "scale",
    "select_rows",
    "silu",
    "sqrt",
    "square",
    "stop_grad",
    "sub",
    "sum_all",
    "sum_rows",
    "tanh",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible with the primitive."""


class DomainError(ValueError):
    """An input lies outside the domain of the primitive."""


def _as_array(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    return arr


def _check_finite(value: np.ndarray, op: str) -> None:
    # a sum is finite iff every term is (barring overflow near 1e308)
    if not np.isfinite(np.sum(value)):
        raise FloatingPointError(f"{op} produced non-finite values")


class Node:
    """One recorded value on a tape.

    ``parents`` and ``vjp`` are empty for leaves.  ``vjp`` maps the gradient of
    the root w.r.t. this node to one gradient per parent.
    """

    __slots__ = ("tape", "value", "parents", "vjp", "requires_grad", "is_param", "name", "index")

    def __init__(self, tape: "Tape", value: np.ndarray, parents=(), vjp=None,
                 requires_grad=False, is_param=False, name=None):
        self.tape = tape
        self.value = value
        self.value.flags.writeable = False
        self.parents = tuple(parents)
        self.vjp = vjp
        self.requires_grad = requires_grad
        self.is_param = is_param
        self.name = name
        self.index = -1

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __repr__(self) -> str:
        kind = "param" if self.is_param else ("var" if self.requires_grad else "const")
        label = f" {self.name!r}" if self.name else ""
        return f"Node({kind}{label}, shape={self.shape})"

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


class Tape:
    """Append-only record of primitive applications.

    Parents always precede children in ``nodes``, so a single reverse sweep is
    a valid topological order for the backward pass.  A tape is meant to be
    built, differentiated once or a few times and then dropped.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def _append(self, node: Node) -> Node:
        node.index = len(self.nodes)
        self.nodes.append(node)
        return node

    def param(self, value, name: str | None = None) -> Node:
        value = _as_array(value)
        _check_finite(value, "param")
        return self._append(Node(self, value, requires_grad=True, is_param=True, name=name))

    def const(self, value) -> Node:
        value = _as_array(value)
        _check_finite(value, "const")
        return Node(self, value)

    def record(self, value: np.ndarray, parents: Sequence[Node], vjp: Callable, op: str) -> Node:
        _check_finite(value, op)
        if not any(p.requires_grad for p in parents):
            return Node(self, value)
        return self._append(Node(self, value, parents, vjp, requires_grad=True))

    def backward(self, root: Node) -> dict[Node, np.ndarray]:
        """Gradients of the scalar ``root`` w.r.t. every parameter on the tape.

        Parameters the root does not depend on (including ones hidden behind
        :func:`stop_grad`) receive an all-zero gradient.
        """
        if root.value.size != 1:
            raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
        if root.tape is not self:
            raise ValueError("root belongs to a different tape")
        grads: dict[int, np.ndarray] = {}
        if root.requires_grad:
            grads[root.index] = np.ones_like(root.value)
            for node in reversed(self.nodes[: root.index + 1]):
                g = grads.pop(node.index, None) if not node.is_param else grads.get(node.index)
                if g is None or node.vjp is None:
                    continue
                for parent, pg in zip(node.parents, node.vjp(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    if parent.index in grads:
                        grads[parent.index] = grads[parent.index] + pg
                    else:
                        grads[parent.index] = pg
        out = {}
        for node in self.nodes:
            if node.is_param:
                out[node] = grads.get(node.index, np.zeros_like(node.value))
        return out


def _lift(a, like: Node) -> Node:
    if isinstance(a, Node):
        return a
    return like.tape.const(a)


def _pair(a, b) -> tuple[Node, Node]:
    if isinstance(a, Node):
        return a, _lift(b, a)
    if isinstance(b, Node):
        return _lift(a, b), b
    raise TypeError("at least one operand must be a Node")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if shape == ():
        return np.asarray(g.sum())
    return g


def _check_elementwise(a: Node, b: Node, op: str) -> None:
    if a.shape != b.shape and a.value.ndim != 0 and b.value.ndim != 0:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a, b) -> Node:
    a, b = _pair(a, b)
    _check_elementwise(a, b, "add")
    return a.tape.record(a.value + b.value, (a, b),
                         lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Node:
    a, b = _pair(a, b)
    _check_elementwise(a, b, "sub")
    return a.tape.record(a.value - b.value, (a, b),
                         lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Node:
    a, b = _pair(a, b)
    _check_elementwise(a, b, "mul")
    av, bv = a.value, b.value
    return a.tape.record(av * bv, (a, b),
                         lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)), "mul")


def scale(a: Node, k: float) -> Node:
    k = float(k)
    return a.tape.record(a.value * k, (a,), lambda g: (g * k,), "scale")


def square(a: Node) -> Node:
    av = a.value
    return a.tape.record(av * av, (a,), lambda g: (2.0 * g * av,), "square")


def sqrt(a: Node) -> Node:
    if np.any(a.value <= 0.0):
        raise DomainError("sqrt requires strictly positive inputs")
    out = np.sqrt(a.value)
    return a.tape.record(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def silu(a: Node) -> Node:
    av = a.value
    sig = 0.5 * (1.0 + np.tanh(0.5 * av))
    out = av * sig
    return a.tape.record(out, (a,), lambda g: (g * (sig * (1.0 + av * (1.0 - sig))),), "silu")


def tanh(a: Node) -> Node:
    out = np.tanh(a.value)
    return a.tape.record(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def matmul(a, b) -> Node:
    a, b = _pair(a, b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.value, b.value

    def vjp(g):
        return (g @ bv.T if a.requires_grad else None, av.T @ g if b.requires_grad else None)

    return a.tape.record(av @ bv, (a, b), vjp, "matmul")


def add_bias(x: Node, bias: Node) -> Node:
    """``x[i, j] + bias[j]`` for a 2-d ``x``."""
    x, bias = _pair(x, bias)
    if x.value.ndim != 2 or bias.shape != (x.shape[1],):
        raise DimensionError(f"add_bias: bias {bias.shape} does not fit {x.shape}")
    return x.tape.record(x.value + bias.value, (x, bias), lambda g: (g, g.sum(axis=0)), "add_bias")


def mul_rows(x: Node, col) -> Node:
    """``x[i, j] * col[i]``: scales each row by its own coefficient."""
    x, col = _pair(x, col)
    if x.value.ndim != 2 or col.shape != (x.shape[0],):
        raise DimensionError(f"mul_rows: coefficients {col.shape} do not fit {x.shape}")
    xv, cv = x.value, col.value[:, None]
    return x.tape.record(xv * cv, (x, col), lambda g: (g * cv, (g * xv).sum(axis=1)), "mul_rows")


def sum_rows(x: Node) -> Node:
    """Per-row sum of a 2-d array, shape ``(m,)``."""
    if x.value.ndim != 2:
        raise DimensionError(f"sum_rows: expected 2-d input, got {x.shape}")
    n = x.shape[1]
    return x.tape.record(x.value.sum(axis=1), (x,),
                         lambda g: (np.repeat(g[:, None], n, axis=1),), "sum_rows")


def sum_all(x: Node) -> Node:
    shape = x.shape
    return x.tape.record(np.asarray(x.value.sum()), (x,), lambda g: (np.full(shape, float(g)),), "sum")


def mean(x: Node) -> Node:
    if x.value.size == 0:
        raise DimensionError("mean of an empty array")
    n = x.value.size
    shape = x.shape
    return x.tape.record(np.asarray(x.value.mean()), (x,), lambda g: (np.full(shape, float(g) / n),), "mean")


def concat(parts: Sequence[Node], axis: int = 1) -> Node:
    parts = list(parts)
    if not parts:
        raise DimensionError("concat of nothing")
    first = next(p for p in parts if isinstance(p, Node))
    parts = [_lift(p, first) for p in parts]
    try:
        out = np.concatenate([p.value for p in parts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

    def vjp(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return first.tape.record(out, parts, vjp, "concat")


def select_rows(mask, a: Node, b: Node) -> Node:
    """Row-wise splice: row ``i`` comes from ``a`` where ``mask[i]`` else ``b``."""
    a, b = _pair(a, b)
    mask = np.asarray(mask, dtype=bool)
    if a.shape != b.shape or mask.shape != (a.shape[0],):
        raise DimensionError(f"select_rows: mask {mask.shape}, branches {a.shape} / {b.shape}")
    m = mask.reshape((-1,) + (1,) * (a.value.ndim - 1))
    out = np.where(m, a.value, b.value)
    return a.tape.record(out, (a, b), lambda g: (np.where(m, g, 0.0), np.where(m, 0.0, g)), "select_rows")


def stop_grad(a: Node) -> Node:
    """Same value, but treated as a constant by :meth:`Tape.backward`."""
    return Node(a.tape, a.value)


def grad_check(f: Callable[[Tape, dict], Node], params: dict[str, np.ndarray], step: float = 1e-5,
               coords: Iterable[tuple[str, int]] | None = None) -> float:
    """Max relative error between tape gradients and central differences.

    ``f(tape, nodes)`` must build a scalar from the parameter nodes in
    ``nodes`` (same keys as ``params``).  The error per coordinate is
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def value_at(ps) -> float:
        tape = Tape()
        out = f(tape, {k: tape.param(v, name=k) for k, v in ps.items()})
        val = float(out.value)
        if not np.isfinite(val):
            raise FloatingPointError("grad_check: non-finite function value")
        return val

    tape = Tape()
    nodes = {k: tape.param(v, name=k) for k, v in params.items()}
    root = f(tape, nodes)
    grads = tape.backward(root)
    analytic = {k: grads[n] for k, n in nodes.items()}

    if coords is None:
        coords = [(k, i) for k, v in params.items() for i in range(v.size)]
    worst = 0.0
    for key, i in coords:
        base = params[key]
        plus = {**params, key: base.copy()}
        minus = {**params, key: base.copy()}
        plus[key].flat[i] += step
        minus[key].flat[i] -= step
        numeric = (value_at(plus) - value_at(minus)) / (2.0 * step)
        a = float(analytic[key].flat[i])
        if not np.isfinite(numeric) or not np.isfinite(a):
            raise FloatingPointError(f"grad_check: non-finite gradient at {key}[{i}]")
        worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
