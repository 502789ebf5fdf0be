"""Minimal reverse-mode autodiff over scalar and 1-D vector expressions.

A graph is built once from ``leaf``/``const`` nodes and the operator helpers,
frozen into a :class:`Tape`, and then re-evaluated many times with fresh leaf
values.  Values are float64 scalars or 1-D float64 arrays.  Broadcasting is
limited to scalar-with-vector; anything richer is out of scope.

A Tape caches forward values and adjoints on its nodes, so it is a
single-writer object: concurrent evaluation requires independent tapes.
"""

from __future__ import annotations

import numpy as np

_DOMAIN_EPS = 1e-12


class DiffGraphError(Exception):
    """Base class for graph construction and evaluation failures."""


class GraphError(DiffGraphError):
    """Raised for structural problems while building a graph."""


class EvaluationError(DiffGraphError):
    """Raised when a forward/backward pass cannot produce a finite result."""


def _as_value(x):
    """Coerce to float or 1-D float64 array."""
    if isinstance(x, (int, float, np.floating, np.integer)):
        return float(x)
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        return float(arr)
    if arr.ndim != 1:
        raise GraphError(f"values must be scalars or 1-D vectors, got shape {arr.shape}")
    return arr


def _shape_of(value):
    return None if isinstance(value, float) else len(value)


def _merge_shapes(op, sa, sb):
    # None = scalar; scalar broadcasts against a vector, vectors must match.
    if sa is None:
        return sb
    if sb is None or sa == sb:
        return sa
    raise GraphError(f"{op}: incompatible operand sizes {sa} and {sb}")


class Node:
    """One expression node: an op kind, parent links, and cached value/adjoint."""

    __slots__ = ("op", "parents", "payload", "shape", "value", "adjoint", "_aux")

    def __init__(self, op, parents=(), payload=None, shape=None):
        self.op = op
        self.parents = tuple(parents)
        self.payload = payload
        self.shape = shape
        self.value = None
        self.adjoint = None
        self._aux = None  # op-specific forward scratch reused by backward

    def __repr__(self):
        return f"Node({self.op}, shape={self.shape})"

    # Operator sugar so graph-building code reads like arithmetic.
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


def _lift(x):
    return x if isinstance(x, Node) else const(x)


def const(value):
    v = _as_value(value)
    node = Node("const", payload=v, shape=_shape_of(v))
    node.value = v
    return node


def leaf(name, size=None):
    """Named input node; ``size=None`` declares a scalar leaf."""
    if size is not None:
        size = int(size)
        if size <= 0:
            raise GraphError("leaf size must be positive")
    return Node("leaf", payload=name, shape=size)


def add(a, b):
    a, b = _lift(a), _lift(b)
    return Node("add", (a, b), shape=_merge_shapes("add", a.shape, b.shape))


def sub(a, b):
    a, b = _lift(a), _lift(b)
    return Node("sub", (a, b), shape=_merge_shapes("sub", a.shape, b.shape))


def mul(a, b):
    a, b = _lift(a), _lift(b)
    return Node("mul", (a, b), shape=_merge_shapes("mul", a.shape, b.shape))


def div(a, b):
    a, b = _lift(a), _lift(b)
    return Node("div", (a, b), shape=_merge_shapes("div", a.shape, b.shape))


def neg(a):
    a = _lift(a)
    return Node("neg", (a,), shape=a.shape)


def exp(a):
    a = _lift(a)
    return Node("exp", (a,), shape=a.shape)


def log(a):
    a = _lift(a)
    return Node("log", (a,), shape=a.shape)


def tanh(a):
    a = _lift(a)
    return Node("tanh", (a,), shape=a.shape)


def power(a, p):
    """Elementwise a**p for a constant real exponent p."""
    a = _lift(a)
    return Node("power", (a,), payload=float(p), shape=a.shape)


def vsum(a):
    a = _lift(a)
    if a.shape is None:
        raise GraphError("vsum expects a vector operand")
    return Node("vsum", (a,), shape=None)


def softmin(a, k):
    """Smooth minimum -(1/k) * ln(sum exp(-k * a_i)) over a vector."""
    a = _lift(a)
    if a.shape is None:
        raise GraphError("softmin expects a vector operand")
    if not k > 0:
        raise GraphError("softmin temperature k must be positive")
    return Node("softmin", (a,), payload=float(k), shape=None)


def softmax(a, k):
    """Smooth maximum (1/k) * ln(sum exp(k * a_i)) over a vector."""
    a = _lift(a)
    if a.shape is None:
        raise GraphError("softmax expects a vector operand")
    if not k > 0:
        raise GraphError("softmax temperature k must be positive")
    return Node("softmax", (a,), payload=float(k), shape=None)


def stack(parts):
    """Concatenate scalars and vectors into one vector."""
    parts = tuple(_lift(p) for p in parts)
    if not parts:
        raise GraphError("stack needs at least one part")
    size = sum(1 if p.shape is None else p.shape for p in parts)
    return Node("stack", parts, shape=size)


def index(a, i):
    a = _lift(a)
    if a.shape is None:
        raise GraphError("index expects a vector operand")
    i = int(i)
    if not 0 <= i < a.shape:
        raise GraphError(f"index {i} out of range for size {a.shape}")
    return Node("index", (a,), payload=i, shape=None)


def dot(a, b):
    return vsum(mul(a, b))


class Tape:
    """A frozen expression graph: topological node order plus a leaf registry.

    Leaves sharing a name are treated as one logical input: forward assigns
    them the same value and backward sums their adjoints.
    """

    def __init__(self, output):
        if not isinstance(output, Node):
            raise GraphError("tape output must be a Node")
        self.output = output
        self.nodes = self._toposort(output)
        self.leaves = {}
        for node in self.nodes:
            if node.op == "leaf":
                prior = self.leaves.setdefault(node.payload, [])
                if prior and prior[0].shape != node.shape:
                    raise GraphError(
                        f"leaf {node.payload!r} declared with conflicting sizes")
                prior.append(node)
        self._forwarded = False

    @staticmethod
    def _toposort(output):
        order = []
        seen = set()
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node.parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return order

    @property
    def leaf_names(self):
        return tuple(self.leaves)

    def forward(self, leaf_values):
        return forward(self, leaf_values)

    def backward(self):
        return backward(self)


def _check_finite(op, value):
    if isinstance(value, float):
        if not np.isfinite(value):
            raise EvaluationError(f"{op} produced a non-finite value")
    elif not np.all(np.isfinite(value)):
        raise EvaluationError(f"{op} produced a non-finite value")
    return value


def forward(tape, leaf_values):
    """Evaluate the tape at the given leaf values and return the output value."""
    for name, nodes in tape.leaves.items():
        if name not in leaf_values:
            raise EvaluationError(f"missing value for leaf {name!r}")
        v = _as_value(leaf_values[name])
        if _shape_of(v) != nodes[0].shape:
            raise EvaluationError(
                f"leaf {name!r}: expected shape {nodes[0].shape}, got {_shape_of(v)}")
        for node in nodes:
            node.value = v

    for node in tape.nodes:
        op = node.op
        if op in ("leaf", "const"):
            continue
        p = node.parents
        if op == "add":
            node.value = p[0].value + p[1].value
        elif op == "sub":
            node.value = p[0].value - p[1].value
        elif op == "mul":
            node.value = p[0].value * p[1].value
        elif op == "div":
            d = p[1].value
            if np.min(np.abs(d)) < _DOMAIN_EPS:
                raise EvaluationError("division by a near-zero denominator")
            node.value = p[0].value / d
        elif op == "neg":
            node.value = -p[0].value
        elif op == "exp":
            node.value = _check_finite("exp", np.exp(p[0].value))
            if isinstance(p[0].value, float):
                node.value = float(node.value)
        elif op == "log":
            v = p[0].value
            if np.min(v) < _DOMAIN_EPS:
                raise EvaluationError("log of a non-positive value")
            node.value = np.log(v)
            if isinstance(v, float):
                node.value = float(node.value)
        elif op == "tanh":
            node.value = np.tanh(p[0].value)
            if isinstance(p[0].value, float):
                node.value = float(node.value)
        elif op == "power":
            base, expo = p[0].value, node.payload
            if expo != int(expo) and np.min(base) < 0.0:
                raise EvaluationError("fractional power of a negative base")
            if expo < 0 and np.min(np.abs(base)) < _DOMAIN_EPS:
                raise EvaluationError("negative power of a near-zero base")
            node.value = _check_finite("power", base ** expo)
            if isinstance(base, float):
                node.value = float(node.value)
        elif op == "vsum":
            node.value = float(np.sum(p[0].value))
        elif op == "softmin":
            a, k = p[0].value, node.payload
            m = float(np.min(a))
            w = np.exp(-k * (a - m))
            s = float(np.sum(w))
            node._aux = w / s
            node.value = m - np.log(s) / k
        elif op == "softmax":
            a, k = p[0].value, node.payload
            m = float(np.max(a))
            w = np.exp(k * (a - m))
            s = float(np.sum(w))
            node._aux = w / s
            node.value = m + np.log(s) / k
        elif op == "stack":
            node.value = np.concatenate(
                [np.atleast_1d(q.value) for q in p]).astype(np.float64)
        elif op == "index":
            node.value = float(p[0].value[node.payload])
        else:  # pragma: no cover
            raise GraphError(f"unknown op {op!r}")

    tape._forwarded = True
    return _check_finite("output", tape.output.value)


def _zero_like(node):
    return 0.0 if node.shape is None else np.zeros(node.shape)


def _accum(node, g):
    # Reduce a broadcast vector adjoint back onto a scalar parent.
    if node.shape is None and not isinstance(g, float):
        g = float(np.sum(g))
    node.adjoint = node.adjoint + g


def backward(tape):
    """Reverse pass; returns exact gradients of the scalar output per leaf name."""
    if not tape._forwarded:
        raise EvaluationError("backward called before forward")
    if tape.output.shape is not None:
        raise EvaluationError("backward requires a scalar output")

    for node in tape.nodes:
        node.adjoint = _zero_like(node)
    tape.output.adjoint = 1.0

    for node in reversed(tape.nodes):
        g = node.adjoint
        op = node.op
        if op in ("leaf", "const"):
            continue
        p = node.parents
        if op == "add":
            _accum(p[0], g)
            _accum(p[1], g)
        elif op == "sub":
            _accum(p[0], g)
            _accum(p[1], -g)
        elif op == "mul":
            _accum(p[0], g * p[1].value)
            _accum(p[1], g * p[0].value)
        elif op == "div":
            _accum(p[0], g / p[1].value)
            _accum(p[1], -g * node.value / p[1].value)
        elif op == "neg":
            _accum(p[0], -g)
        elif op == "exp":
            _accum(p[0], g * node.value)
        elif op == "log":
            _accum(p[0], g / p[0].value)
        elif op == "tanh":
            _accum(p[0], g * (1.0 - node.value * node.value))
        elif op == "power":
            expo = node.payload
            _accum(p[0], g * expo * p[0].value ** (expo - 1.0))
        elif op == "vsum":
            p[0].adjoint = p[0].adjoint + g
        elif op == "softmin":
            p[0].adjoint = p[0].adjoint + g * node._aux
        elif op == "softmax":
            p[0].adjoint = p[0].adjoint + g * node._aux
        elif op == "stack":
            off = 0
            for q in p:
                width = 1 if q.shape is None else q.shape
                piece = g[off:off + width]
                _accum(q, float(piece[0]) if q.shape is None else piece)
                off += width
        elif op == "index":
            gv = np.zeros(p[0].shape)
            gv[node.payload] = g
            p[0].adjoint = p[0].adjoint + gv

    out = {}
    for name, nodes in tape.leaves.items():
        total = nodes[0].adjoint
        for node in nodes[1:]:
            total = total + node.adjoint
        out[name] = total
    return out


def grad_check(tape, leaf_values, step=1e-6):
    """Max relative gap between analytic and central-difference leaf gradients.

    The per-component metric is |analytic - fd| / max(1, |analytic|).
    """
    if not step > 0:
        raise ValueError("step must be positive")
    if tape.output.shape is not None:
        raise EvaluationError("grad_check requires a scalar output")

    forward(tape, leaf_values)
    analytic = backward(tape)

    values = {name: _as_value(v) for name, v in leaf_values.items()}
    worst = 0.0
    for name in tape.leaves:
        base = values[name]
        a = np.atleast_1d(np.asarray(analytic[name], dtype=np.float64))
        fd = np.zeros_like(a)
        for i in range(a.size):
            for sign, target in ((+1.0, 0), (-1.0, 1)):
                probe = dict(values)
                if isinstance(base, float):
                    probe[name] = base + sign * step
                else:
                    bumped = base.copy()
                    bumped[i] += sign * step
                    probe[name] = bumped
                if target == 0:
                    hi = forward(tape, probe)
                else:
                    lo = forward(tape, probe)
            fd[i] = (hi - lo) / (2.0 * step)
        gap = np.abs(a - fd) / np.maximum(1.0, np.abs(a))
        worst = max(worst, float(np.max(gap)))
    # restore caches for the original point
    forward(tape, leaf_values)
    backward(tape)
    return worst
