"""Tape-based reverse-mode automatic differentiation on float64 numpy arrays.

A :class:`Tape` records every primitive evaluated on it.  Forward values are
computed eagerly; :func:`backward` walks the tape once in decreasing node order
and accumulates vector-Jacobian products.

Values may be scalars, vectors or stacked (batched) arrays.  Binary operations
follow numpy broadcasting, and the backward pass sums adjoints back down to the
operand shape.  A plain array passed where a :class:`Var` is expected is treated
as a constant and receives no adjoint.

Example
-------
>>> tape = Tape()
>>> x = tape.variable([1.0, 2.0, 3.0])
>>> y = dot(x, x)
>>> backward(y)[x]
array([2., 4., 6.])
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tape",
    "Var",
    "Gradients",
    "GradCheckReport",
    "ShapeError",
    "TapeMismatchError",
    "backward",
    "grad_check",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "sum",
    "mean",
    "dot",
    "sq_norm",
    "abs",
    "sqrt",
    "square",
    "tanh",
    "log",
    "log10",
    "minimum",
    "maximum",
    "matvec",
    "matmul",
    "transpose",
    "reshape",
    "getitem",
    "concat",
    "stack",
]

_LN10 = math.log(10.0)
_tape_ids = itertools.count()


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested primitive."""


class TapeMismatchError(ValueError):
    """Vars from different tapes were combined."""


VJP = Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class _Node:
    kind: str
    parents: tuple[int, ...]
    value: np.ndarray
    vjp: VJP | None


class Tape:
    """Append-only record of primitive operations.

    Node ids are list indices, so operands always precede their results and
    the recording order is already a topological order.
    """

    def __init__(self) -> None:
        self.id = next(_tape_ids)
        self.nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def variable(self, value) -> Var:
        """Create a differentiable leaf."""
        arr = np.array(value, dtype=np.float64)
        return self._push("input", (), arr, None)

    def record(self, kind: str, operands: Sequence[Var], value, vjp: VJP) -> Var:
        """Append a primitive with a precomputed value.

        ``vjp(adjoint)`` must return one adjoint (or ``None``) per operand.
        This is the extension point used by fused primitives.
        """
        for v in operands:
            if v.tape is not self:
                raise TapeMismatchError("operand belongs to a different tape")
        arr = np.asarray(value, dtype=np.float64)
        return self._push(kind, tuple(v.node_id for v in operands), arr, vjp)

    def _push(self, kind, parents, value, vjp) -> Var:
        self.nodes.append(_Node(kind, parents, value, vjp))
        return Var(self, len(self.nodes) - 1)


class Var:
    """Handle to a node on a tape."""

    __slots__ = ("tape", "node_id")
    __array_ufunc__ = None  # ndarray <op> Var defers to Var's reflected ops

    def __init__(self, tape: Tape, node_id: int) -> None:
        self.tape = tape
        self.node_id = node_id

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.node_id].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def kind(self) -> str:
        return self.tape.nodes[self.node_id].kind

    def __repr__(self) -> str:
        return f"Var(node={self.node_id}, kind={self.kind!r}, shape={self.shape})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)


@dataclass
class Gradients:
    """Adjoints of one backward sweep, indexed by Var or node id."""

    tape: Tape
    adjoints: dict[int, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, key: Var | int) -> np.ndarray:
        if isinstance(key, Var):
            if key.tape is not self.tape:
                raise TapeMismatchError("Var belongs to a different tape")
            key = key.node_id
        adj = self.adjoints.get(key)
        if adj is None:
            return np.zeros_like(self.tape.nodes[key].value)
        return adj


def backward(root: Var) -> Gradients:
    """Reverse sweep from a scalar root; returns d(root)/d(node) for all nodes."""
    if root.value.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    nodes = root.tape.nodes
    adj: list[np.ndarray | None] = [None] * (root.node_id + 1)
    adj[root.node_id] = np.ones_like(root.value)
    for i in range(root.node_id, -1, -1):
        g = adj[i]
        node = nodes[i]
        if g is None or node.vjp is None:
            continue
        for pid, pg in zip(node.parents, node.vjp(g)):
            if pg is None:
                continue
            if adj[pid] is None:
                adj[pid] = pg
            else:
                adj[pid] = adj[pid] + pg
    out = {i: a for i, a in enumerate(adj) if a is not None}
    return Gradients(root.tape, out)


# -- helpers ---------------------------------------------------------------


def _split(*operands):
    """Find the tape among operands and return (tape, values, var-flags)."""
    tape = None
    for x in operands:
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise TapeMismatchError("cannot combine Vars from different tapes")
    if tape is None:
        raise TypeError("at least one operand must be a Var")
    vals = [x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64) for x in operands]
    return tape, vals


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(*shapes):
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError as exc:
        raise ShapeError(f"incompatible shapes {shapes}") from exc


def _emit(kind, operands, value, grads_fn):
    """Record a node whose operands may mix Vars and constants.

    ``grads_fn(g)`` returns one adjoint per operand; adjoints for constant
    operands are dropped.
    """
    tape, _ = _split(*operands)
    var_pos = [i for i, x in enumerate(operands) if isinstance(x, Var)]
    parents = [operands[i] for i in var_pos]

    def vjp(g):
        full = grads_fn(g)
        return [full[i] for i in var_pos]

    return tape.record(kind, parents, value, vjp)


def _wants(x) -> bool:
    return isinstance(x, Var)


# -- elementwise binary ------------------------------------------------------


def add(a, b) -> Var:
    tape, (va, vb) = _split(a, b)
    _broadcast_shape(va.shape, vb.shape)
    return _emit(
        "add",
        (a, b),
        va + vb,
        lambda g: (_unbroadcast(g, va.shape), _unbroadcast(g, vb.shape)),
    )


def sub(a, b) -> Var:
    tape, (va, vb) = _split(a, b)
    _broadcast_shape(va.shape, vb.shape)
    return _emit(
        "sub",
        (a, b),
        va - vb,
        lambda g: (_unbroadcast(g, va.shape), _unbroadcast(-g, vb.shape)),
    )


def mul(a, b) -> Var:
    tape, (va, vb) = _split(a, b)
    _broadcast_shape(va.shape, vb.shape)
    return _emit(
        "mul",
        (a, b),
        va * vb,
        lambda g: (
            _unbroadcast(g * vb, va.shape) if _wants(a) else None,
            _unbroadcast(g * va, vb.shape) if _wants(b) else None,
        ),
    )


def div(a, b) -> Var:
    tape, (va, vb) = _split(a, b)
    _broadcast_shape(va.shape, vb.shape)
    out = va / vb
    return _emit(
        "div",
        (a, b),
        out,
        lambda g: (
            _unbroadcast(g / vb, va.shape) if _wants(a) else None,
            _unbroadcast(-g * out / vb, vb.shape) if _wants(b) else None,
        ),
    )


def minimum(a: Var, bound) -> Var:
    """Elementwise min with a constant; ties route the adjoint to ``a``."""
    tape, (va, vb) = _split(a, bound)
    if isinstance(bound, Var):
        raise TypeError("minimum expects a constant bound")
    _broadcast_shape(va.shape, vb.shape)
    out = np.minimum(va, vb)
    keep = va <= vb
    return _emit("minimum", (a,), out, lambda g: (_unbroadcast(np.where(keep, g, 0.0), va.shape),))


def maximum(a: Var, floor) -> Var:
    """Elementwise max with a constant; used for epsilon floors."""
    tape, (va, vb) = _split(a, floor)
    if isinstance(floor, Var):
        raise TypeError("maximum expects a constant floor")
    _broadcast_shape(va.shape, vb.shape)
    out = np.maximum(va, vb)
    keep = va >= vb
    return _emit("maximum", (a,), out, lambda g: (_unbroadcast(np.where(keep, g, 0.0), va.shape),))


# -- elementwise unary -------------------------------------------------------


def neg(a: Var) -> Var:
    return a.tape.record("neg", (a,), -a.value, lambda g: (-g,))


def abs(a: Var) -> Var:
    # np.sign(0) == 0, so the subgradient at the kink is 0
    v = a.value
    return a.tape.record("abs", (a,), np.abs(v), lambda g: (g * np.sign(v),))


def sqrt(a: Var) -> Var:
    out = np.sqrt(a.value)
    return a.tape.record("sqrt", (a,), out, lambda g: (g / (2.0 * out),))


def square(a: Var) -> Var:
    v = a.value
    return a.tape.record("square", (a,), v * v, lambda g: (2.0 * g * v,))


def tanh(a: Var) -> Var:
    out = np.tanh(a.value)
    return a.tape.record("tanh", (a,), out, lambda g: (g * (1.0 - out * out),))


def log(a: Var) -> Var:
    v = a.value
    return a.tape.record("log", (a,), np.log(v), lambda g: (g / v,))


def log10(a: Var) -> Var:
    v = a.value
    return a.tape.record("log10", (a,), np.log10(v), lambda g: (g / (v * _LN10),))


# -- reductions ---------------------------------------------------------------


def _expand(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum(a: Var, axis=None, keepdims: bool = False) -> Var:
    shape = a.shape
    out = np.sum(a.value, axis=axis, keepdims=keepdims)
    return a.tape.record("sum", (a,), out, lambda g: (_expand(g, shape, axis, keepdims).copy(),))


def mean(a: Var, axis=None, keepdims: bool = False) -> Var:
    shape = a.shape
    out = np.mean(a.value, axis=axis, keepdims=keepdims)
    n = a.value.size // max(out.size, 1)
    return a.tape.record(
        "mean", (a,), out, lambda g: (_expand(g / n, shape, axis, keepdims).copy(),)
    )


def dot(a, b) -> Var:
    """Inner product over the last axis (batched over leading axes)."""
    tape, (va, vb) = _split(a, b)
    if va.shape[-1:] != vb.shape[-1:]:
        raise ShapeError(f"dot: last axes differ, {va.shape} vs {vb.shape}")
    _broadcast_shape(va.shape[:-1], vb.shape[:-1])
    out = np.sum(va * vb, axis=-1)

    def grads(g):
        ge = np.expand_dims(g, -1)
        return (
            _unbroadcast(ge * vb, va.shape) if _wants(a) else None,
            _unbroadcast(ge * va, vb.shape) if _wants(b) else None,
        )

    return _emit("dot", (a, b), out, grads)


def sq_norm(a: Var, axis=-1) -> Var:
    """Squared L2 norm along ``axis`` (all axes if None)."""
    v = a.value
    out = np.sum(v * v, axis=axis)

    def vjp(g):
        if axis is None:
            return (2.0 * g * v,)
        return (2.0 * np.expand_dims(g, axis) * v,)

    return a.tape.record("sq_norm", (a,), out, vjp)


# -- linear maps and structure ---------------------------------------------


def matvec(matrix, x: Var) -> Var:
    """Apply a constant matrix (or a stack of them) to the last axis of ``x``.

    ``matrix`` has shape ``(..., m, n)`` and ``x`` shape ``(..., n)``; leading
    axes broadcast.
    """
    if isinstance(matrix, Var):
        raise TypeError("matvec expects a constant matrix; use matmul for Var @ Var")
    m = np.asarray(matrix, dtype=np.float64)
    v = x.value
    if m.ndim < 2 or m.shape[-1] != v.shape[-1]:
        raise ShapeError(f"matvec: matrix {m.shape} incompatible with vector {v.shape}")
    out = (m @ v[..., None])[..., 0]

    def vjp(g):
        back = (g[..., None, :] @ m)[..., 0, :]
        return (_unbroadcast(back, v.shape),)

    return x.tape.record("matvec", (x,), out, vjp)


def matmul(a, b) -> Var:
    """Matrix product with numpy ``@`` semantics on 2-D or stacked operands."""
    tape, (va, vb) = _split(a, b)
    if va.ndim < 2 or vb.ndim < 2:
        raise ShapeError("matmul needs operands with at least 2 dimensions")
    if va.shape[-1] != vb.shape[-2]:
        raise ShapeError(f"matmul: {va.shape} @ {vb.shape}")
    _broadcast_shape(va.shape[:-2], vb.shape[:-2])
    out = va @ vb

    def grads(g):
        return (
            _unbroadcast(g @ np.swapaxes(vb, -1, -2), va.shape) if _wants(a) else None,
            _unbroadcast(np.swapaxes(va, -1, -2) @ g, vb.shape) if _wants(b) else None,
        )

    return _emit("matmul", (a, b), out, grads)


def transpose(a: Var) -> Var:
    """Swap the last two axes."""
    return a.tape.record(
        "transpose", (a,), np.swapaxes(a.value, -1, -2), lambda g: (np.swapaxes(g, -1, -2),)
    )


def reshape(a: Var, shape) -> Var:
    old = a.shape
    return a.tape.record("reshape", (a,), a.value.reshape(shape), lambda g: (g.reshape(old),))


def getitem(a: Var, index) -> Var:
    """Basic or fancy indexing; repeated indices accumulate in the adjoint."""
    v = a.value
    out = v[index]

    def vjp(g):
        full = np.zeros_like(v)
        np.add.at(full, index, g)
        return (full,)

    return a.tape.record("slice", (a,), np.array(out, dtype=np.float64), vjp)


def concat(parts: Sequence, axis: int = 0) -> Var:
    tape, vals = _split(*parts)
    try:
        out = np.concatenate(vals, axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return _emit("concat", tuple(parts), out, lambda g: np.split(g, bounds, axis=axis))


def stack(parts: Sequence, axis: int = 0) -> Var:
    tape, vals = _split(*parts)
    try:
        out = np.stack(vals, axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    n = len(vals)
    return _emit(
        "stack",
        tuple(parts),
        out,
        lambda g: [np.take(g, i, axis=axis) for i in range(n)],
    )


# -- gradient checking ------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    analytic: np.ndarray
    numeric: np.ndarray
    skipped: list[int]
    notes: dict[int, str]

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def _eval(f, point):
    tape = Tape()
    x = tape.variable(point)
    y = f(x)
    if not isinstance(y, Var):
        return tape, x, None, float(np.asarray(y))
    return tape, x, y, float(y.value)


def grad_check(
    f: Callable[[Var], Var],
    point,
    h: float = 1e-6,
    tol: float = 1e-5,
    kink_tol: float = 1e-3,
) -> GradCheckReport:
    """Compare reverse-mode adjoints of ``f`` at ``point`` with central differences.

    ``f`` receives a Var holding ``point`` and must return a scalar Var (or a
    constant).  The relative error of coordinate ``i`` is
    ``|a_i - n_i| / max(|a_i|, |n_i|, resolution)``, where ``resolution`` is
    the smallest derivative the central difference can resolve to ``tol``
    given float64 roundoff on ``f``.  A coordinate whose one-sided
    differences disagree by more than ``kink_tol``, and still do at ``h/10``,
    is skipped and noted as a non-differentiable point.
    """
    x0 = np.array(point, dtype=np.float64)
    tape, xv, y, f0 = _eval(f, x0)
    if not np.isfinite(f0):
        raise FloatingPointError(f"f is not finite at the base point: {f0}")
    if y is None:
        analytic = np.zeros_like(x0)
    else:
        if y.value.size != 1:
            raise ShapeError("grad_check needs a scalar-valued f")
        analytic = np.asarray(backward(y)[xv], dtype=np.float64)

    numeric = np.zeros_like(x0)
    rel = np.zeros(x0.size)
    skipped: list[int] = []
    notes: dict[int, str] = {}
    eps = np.finfo(np.float64).eps
    flat = x0.reshape(-1)
    for i in range(flat.size):
        probes = {}
        for sign in (+1, -1):
            xp = flat.copy()
            xp[i] += sign * h
            fp = _eval(f, xp.reshape(x0.shape))[3]
            if not np.isfinite(fp):
                raise FloatingPointError(
                    f"f is not finite at probe coordinate {i} {'+' if sign > 0 else '-'}h: {fp}"
                )
            probes[sign] = fp
        num = (probes[1] - probes[-1]) / (2 * h)
        numeric.reshape(-1)[i] = num
        fwd = (probes[1] - f0) / h
        bwd = (f0 - probes[-1]) / h
        gap = np.abs(fwd - bwd)
        if gap > kink_tol * max(1.0, np.abs(fwd), np.abs(bwd)):
            # curvature makes the one-sided slopes differ by O(h); a kink does not shrink
            small = []
            for sign in (+1, -1):
                xp = flat.copy()
                xp[i] += sign * h / 10
                small.append(_eval(f, xp.reshape(x0.shape))[3])
            gap_small = np.abs((small[0] - f0) / (h / 10) - (f0 - small[1]) / (h / 10))
            if not gap_small < 0.3 * gap:
                skipped.append(i)
                notes[i] = "non-differentiable point"
                continue
        a = analytic.reshape(-1)[i]
        resolution = 4 * eps * max(np.abs(f0), np.abs(probes[1]), np.abs(probes[-1])) / h / tol
        denom = max(np.abs(a), np.abs(num), resolution)
        rel[i] = 0.0 if denom == 0 else np.abs(a - num) / denom
    return GradCheckReport(
        max_rel_error=float(rel.max(initial=0.0)),
        tol=tol,
        analytic=analytic,
        numeric=numeric,
        skipped=skipped,
        notes=notes,
    )
