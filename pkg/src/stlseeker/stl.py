"""Signal temporal logic over discrete-time vector signals.

Formulas are immutable ASTs built from named predicates, Boolean connectives,
and the bounded temporal operators G (always), F (eventually) and U (until).
Two robustness semantics are provided: the classical min/max recursion, used
for all satisfaction verdicts, and a smooth surrogate where min/max are
replaced by temperature-k log-sum-exp, built as a diffgraph tape so that
gradients with respect to every trajectory state are exact.

Text grammar (also documented in the README):

    formula := term (('and'|'or') term)*          left-associative
    term    := unary ('U' '[' INT ',' INT ']' unary)*
    unary   := 'not' unary
             | ('G'|'F') '[' INT ',' INT ']' unary
             | '(' formula ')'
             | IDENT

``and``/``or`` chains at one level share the same precedence; consecutive
identical connectives are flattened into one n-ary node.  Unary operators
bind tighter than U.  The names G, F, U, and, or, not are reserved.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np

from . import diffgraph as dg


class StlError(Exception):
    pass


class FormulaSyntaxError(StlError):
    def __init__(self, message, position):
        super().__init__(f"{message} (at position {position})")
        self.position = position


class UnknownPredicateError(StlError):
    def __init__(self, name, position):
        super().__init__(f"unknown predicate {name!r} (at position {position})")
        self.name = name


class TrajectoryTooShortError(StlError):
    pass


# ---------------------------------------------------------------------------
# Predicates: each evaluates a margin l(x) >= 0 over the state vector.


@dataclass(frozen=True)
class HalfPlane:
    """Affine margin l . x_sel - offset over selected state coordinates."""

    coeffs: tuple
    offset: float
    dims: tuple | None = None

    def margin(self, x):
        sel = x if self.dims is None else x[list(self.dims)]
        return float(np.dot(self.coeffs, sel) - self.offset)

    def smooth_expr(self, x_node, k):
        if self.dims is None:
            return dg.dot(dg.const(np.asarray(self.coeffs)), x_node) - self.offset
        total = None
        for c, d in zip(self.coeffs, self.dims):
            term = dg.index(x_node, d) * c
            total = term if total is None else total + term
        return total - self.offset


@dataclass(frozen=True)
class InsideBox:
    """Positive inside the axis-aligned box: min over the four face margins."""

    lo: tuple
    hi: tuple
    dims: tuple = (0, 1)

    def margin(self, x):
        m = math.inf
        for i, d in enumerate(self.dims):
            m = min(m, x[d] - self.lo[i], self.hi[i] - x[d])
        return float(m)

    def smooth_expr(self, x_node, k):
        faces = []
        for i, d in enumerate(self.dims):
            xi = dg.index(x_node, d)
            faces.append(xi - self.lo[i])
            faces.append(dg.const(self.hi[i]) - xi)
        return dg.softmin(dg.stack(faces), k)


@dataclass(frozen=True)
class InsideDisk:
    """r^2 - ||p - c||^2: positive inside the disk."""

    center: tuple
    radius: float
    dims: tuple = (0, 1)

    def margin(self, x):
        d2 = sum((x[d] - c) ** 2 for d, c in zip(self.dims, self.center))
        return float(self.radius ** 2 - d2)

    def smooth_expr(self, x_node, k):
        expr = dg.const(self.radius ** 2)
        for d, c in zip(self.dims, self.center):
            expr = expr - dg.power(dg.index(x_node, d) - c, 2)
        return expr


@dataclass(frozen=True)
class OutsideDisk:
    """||p - c||^2 - r^2: positive outside the disk."""

    center: tuple
    radius: float
    dims: tuple = (0, 1)

    def margin(self, x):
        d2 = sum((x[d] - c) ** 2 for d, c in zip(self.dims, self.center))
        return float(d2 - self.radius ** 2)

    def smooth_expr(self, x_node, k):
        expr = dg.const(-self.radius ** 2)
        for d, c in zip(self.dims, self.center):
            expr = expr + dg.power(dg.index(x_node, d) - c, 2)
        return expr


# ---------------------------------------------------------------------------
# Formula AST


@dataclass(frozen=True)
class Formula:
    pass


@dataclass(frozen=True)
class TrueFormula(Formula):
    pass


@dataclass(frozen=True)
class Atom(Formula):
    name: str
    predicate: object


@dataclass(frozen=True)
class Not(Formula):
    child: Formula


@dataclass(frozen=True)
class And(Formula):
    children: tuple


@dataclass(frozen=True)
class Or(Formula):
    children: tuple


def _check_interval(a, b, position=0):
    if a < 0 or b < 0 or a > b:
        raise FormulaSyntaxError(f"malformed interval [{a},{b}]", position)
    return int(a), int(b)


@dataclass(frozen=True)
class Always(Formula):
    a: int
    b: int
    child: Formula


@dataclass(frozen=True)
class Eventually(Formula):
    a: int
    b: int
    child: Formula


@dataclass(frozen=True)
class Until(Formula):
    a: int
    b: int
    left: Formula
    right: Formula


@dataclass
class RobustnessResult:
    value: float
    gradient: np.ndarray | None = None


def horizon(phi):
    """Farthest future offset whose state is needed to evaluate phi at t."""
    if isinstance(phi, (TrueFormula, Atom)):
        return 0
    if isinstance(phi, Not):
        return horizon(phi.child)
    if isinstance(phi, (And, Or)):
        return max(horizon(c) for c in phi.children)
    if isinstance(phi, (Always, Eventually)):
        return phi.b + horizon(phi.child)
    if isinstance(phi, Until):
        return phi.b + max(horizon(phi.left), horizon(phi.right))
    raise TypeError(f"not a formula: {phi!r}")


# ---------------------------------------------------------------------------
# Parsing and printing

_TOKEN_RE = re.compile(r"\s*(?:(\()|(\))|(\[)|(\])|(,)|(\d+)|([A-Za-z_]\w*))")
_RESERVED = {"and", "or", "not", "G", "F", "U"}


def _tokenize(text):
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None or m.end() == pos:
            stripped = text[pos:].lstrip()
            if not stripped:
                break
            bad_at = len(text) - len(stripped)
            raise FormulaSyntaxError(f"unexpected character {stripped[0]!r}", bad_at)
        kinds = ("LPAREN", "RPAREN", "LBRACK", "RBRACK", "COMMA", "INT", "WORD")
        for kind, val in zip(kinds, m.groups()):
            if val is not None:
                tokens.append((kind, val, m.start(m.lastindex)))
                break
        pos = m.end()
    tokens.append(("EOF", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, tokens, predicates):
        self.tokens = tokens
        self.predicates = predicates
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def next(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, kind, what):
        tok = self.next()
        if tok[0] != kind:
            raise FormulaSyntaxError(f"expected {what}", tok[2])
        return tok

    def parse_formula(self):
        node = self.parse_term()
        while self.peek()[0] == "WORD" and self.peek()[1] in ("and", "or"):
            op = self.next()[1]
            rhs = self.parse_term()
            cls = And if op == "and" else Or
            if isinstance(node, cls):
                node = cls(node.children + (rhs,))
            else:
                node = cls((node, rhs))
        return node

    def parse_term(self):
        node = self.parse_unary()
        while self.peek()[0] == "WORD" and self.peek()[1] == "U":
            pos = self.next()[2]
            a, b = self.parse_interval(pos)
            rhs = self.parse_unary()
            node = Until(a, b, node, rhs)
        return node

    def parse_interval(self, at):
        self.expect("LBRACK", "'['")
        a = int(self.expect("INT", "integer")[1])
        self.expect("COMMA", "','")
        b = int(self.expect("INT", "integer")[1])
        tok = self.expect("RBRACK", "']'")
        try:
            return _check_interval(a, b)
        except FormulaSyntaxError:
            raise FormulaSyntaxError(f"malformed interval [{a},{b}]", at)

    def parse_unary(self):
        kind, val, pos = self.peek()
        if kind == "WORD" and val == "not":
            self.next()
            return Not(self.parse_unary())
        if kind == "WORD" and val in ("G", "F"):
            self.next()
            a, b = self.parse_interval(pos)
            child = self.parse_unary()
            return Always(a, b, child) if val == "G" else Eventually(a, b, child)
        if kind == "LPAREN":
            self.next()
            node = self.parse_formula()
            self.expect("RPAREN", "')'")
            return node
        if kind == "WORD":
            if val in _RESERVED:
                raise FormulaSyntaxError(f"unexpected keyword {val!r}", pos)
            self.next()
            if val not in self.predicates:
                raise UnknownPredicateError(val, pos)
            return Atom(val, self.predicates[val])
        raise FormulaSyntaxError("expected a formula", pos)


def parse_formula(text, predicates):
    """Parse the text grammar, binding IDENT tokens through ``predicates``."""
    parser = _Parser(_tokenize(text), predicates)
    node = parser.parse_formula()
    tok = parser.peek()
    if tok[0] != "EOF":
        raise FormulaSyntaxError(f"trailing input {tok[1]!r}", tok[2])
    return node


def format_formula(phi):
    """Render back to grammar text; parse(format(phi)) reproduces phi."""
    def wrap(child):
        text = format_formula(child)
        if isinstance(child, (Atom, TrueFormula)):
            return text
        return f"({text})"

    if isinstance(phi, TrueFormula):
        return "true"
    if isinstance(phi, Atom):
        return phi.name
    if isinstance(phi, Not):
        return f"not {wrap(phi.child)}"
    if isinstance(phi, And):
        return " and ".join(wrap(c) for c in phi.children)
    if isinstance(phi, Or):
        return " or ".join(wrap(c) for c in phi.children)
    if isinstance(phi, Always):
        return f"G[{phi.a},{phi.b}] {wrap(phi.child)}"
    if isinstance(phi, Eventually):
        return f"F[{phi.a},{phi.b}] {wrap(phi.child)}"
    if isinstance(phi, Until):
        return f"{wrap(phi.left)} U[{phi.a},{phi.b}] {wrap(phi.right)}"
    raise TypeError(f"not a formula: {phi!r}")


# ---------------------------------------------------------------------------
# Classical (min/max) robustness — the sole source of satisfaction verdicts.


def _states_of(traj):
    states = getattr(traj, "states", traj)
    states = np.asarray(states, dtype=np.float64)
    if states.ndim == 1:
        states = states[:, None]
    return states


def robustness_classic(phi, traj, t=0):
    states = _states_of(traj)
    need = t + horizon(phi) + 1
    if len(states) < need:
        raise TrajectoryTooShortError(
            f"need {need} states to evaluate at t={t}, trajectory has {len(states)}")
    return _rho(phi, states, t)


def _rho(phi, states, t):
    if isinstance(phi, TrueFormula):
        return math.inf
    if isinstance(phi, Atom):
        return phi.predicate.margin(states[t])
    if isinstance(phi, Not):
        return -_rho(phi.child, states, t)
    if isinstance(phi, And):
        return min(_rho(c, states, t) for c in phi.children)
    if isinstance(phi, Or):
        return max(_rho(c, states, t) for c in phi.children)
    if isinstance(phi, Always):
        return min(_rho(phi.child, states, t + tau)
                   for tau in range(phi.a, phi.b + 1))
    if isinstance(phi, Eventually):
        return max(_rho(phi.child, states, t + tau)
                   for tau in range(phi.a, phi.b + 1))
    if isinstance(phi, Until):
        best = -math.inf
        for tp in range(t + phi.a, t + phi.b + 1):
            cand = _rho(phi.right, states, tp)
            for tpp in range(t, tp):
                cand = min(cand, _rho(phi.left, states, tpp))
            best = max(best, cand)
        return best
    raise TypeError(f"not a formula: {phi!r}")


# ---------------------------------------------------------------------------
# Smooth robustness on a diffgraph tape.

# Stand-in for the infinite robustness of ``true`` inside smooth graphs,
# where inf would poison softmin weights.
_SMOOTH_TRUE = 1e6


def build_smooth_expr(phi, state_nodes, k, t=0):
    """Smooth robustness expression of phi at time t over given state nodes.

    ``state_nodes`` is indexed by absolute time; entries up to t + hrz(phi)
    must be present.  Singleton min/max collapse to the bare operand, which
    keeps the log-sum-exp surrogate exact there.
    """
    def smin(parts):
        return parts[0] if len(parts) == 1 else dg.softmin(dg.stack(parts), k)

    def smax(parts):
        return parts[0] if len(parts) == 1 else dg.softmax(dg.stack(parts), k)

    def rec(node, t):
        if isinstance(node, TrueFormula):
            return dg.const(_SMOOTH_TRUE)
        if isinstance(node, Atom):
            return node.predicate.smooth_expr(state_nodes[t], k)
        if isinstance(node, Not):
            return dg.neg(rec(node.child, t))
        if isinstance(node, And):
            return smin([rec(c, t) for c in node.children])
        if isinstance(node, Or):
            return smax([rec(c, t) for c in node.children])
        if isinstance(node, Always):
            return smin([rec(node.child, t + tau)
                         for tau in range(node.a, node.b + 1)])
        if isinstance(node, Eventually):
            return smax([rec(node.child, t + tau)
                         for tau in range(node.a, node.b + 1)])
        if isinstance(node, Until):
            branches = []
            for tp in range(t + node.a, t + node.b + 1):
                parts = [rec(node.right, tp)]
                parts.extend(rec(node.left, tpp) for tpp in range(t, tp))
                branches.append(smin(parts))
            return smax(branches)
        raise TypeError(f"not a formula: {node!r}")

    return rec(phi, t)


def robustness_smooth(phi, state_dim, k, t=0):
    """Build the smooth-robustness tape with vector leaves x0..x{t+hrz}."""
    T = t + horizon(phi)
    leaves = [dg.leaf(f"x{i}", state_dim) for i in range(T + 1)]
    return dg.Tape(build_smooth_expr(phi, leaves, k, t))


class SmoothRobustness:
    """Reusable smooth-robustness evaluator for one formula.

    Builds the tape once; ``value_and_grad`` re-runs it on fresh trajectories
    and assembles the (T+1) x n gradient matrix, with zero rows for states
    the formula never reads.
    """

    def __init__(self, phi, state_dim, k, t=0):
        self.phi = phi
        self.state_dim = state_dim
        self.k = float(k)
        self.t = t
        self.T = t + horizon(phi)
        self.tape = robustness_smooth(phi, state_dim, k, t)

    def _leaf_values(self, states):
        states = _states_of(states)
        if len(states) < self.T + 1:
            raise TrajectoryTooShortError(
                f"need {self.T + 1} states, got {len(states)}")
        return {name: states[int(name[1:])] for name in self.tape.leaf_names}

    def value(self, states):
        return float(dg.forward(self.tape, self._leaf_values(states)))

    def value_and_grad(self, states):
        value = float(dg.forward(self.tape, self._leaf_values(states)))
        grads = dg.backward(self.tape)
        G = np.zeros((self.T + 1, self.state_dim))
        for name, g in grads.items():
            G[int(name[1:])] = g
        return value, G


def robustness_gradient(phi, traj, k):
    """Smooth value plus exact d rho / d x_t rows for one trajectory."""
    states = _states_of(traj)
    value, G = SmoothRobustness(phi, states.shape[1], k).value_and_grad(states)
    return RobustnessResult(value=value, gradient=G)
