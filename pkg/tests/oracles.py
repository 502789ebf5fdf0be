"""Independent reference semantics used by the tests.

``bool_sat`` is a direct Boolean (qualitative) STL evaluator that never
touches robustness values, so it can arbitrate the sign of the classical
semantics.  ``template_formulas`` is the fixed operator template set used by
the exhaustive soundness and smoothness-bound checks: depth <= 3 over 1-D
signals, with predicates p: x > 0, q: x > 1, r: x < 1.
"""

import itertools

import numpy as np

from stlseeker import stl


def bool_sat(phi, states, t=0):
    if isinstance(phi, stl.TrueFormula):
        return True
    if isinstance(phi, stl.Atom):
        return phi.predicate.margin(states[t]) > 0.0
    if isinstance(phi, stl.Not):
        return not bool_sat(phi.child, states, t)
    if isinstance(phi, stl.And):
        return all(bool_sat(c, states, t) for c in phi.children)
    if isinstance(phi, stl.Or):
        return any(bool_sat(c, states, t) for c in phi.children)
    if isinstance(phi, stl.Always):
        return all(bool_sat(phi.child, states, t + tau)
                   for tau in range(phi.a, phi.b + 1))
    if isinstance(phi, stl.Eventually):
        return any(bool_sat(phi.child, states, t + tau)
                   for tau in range(phi.a, phi.b + 1))
    if isinstance(phi, stl.Until):
        for tp in range(t + phi.a, t + phi.b + 1):
            if bool_sat(phi.right, states, tp) and all(
                    bool_sat(phi.left, states, tpp) for tpp in range(t, tp)):
                return True
        return False
    raise TypeError(f"not a formula: {phi!r}")


P = stl.Atom("p", stl.HalfPlane((1.0,), 0.0))
Q = stl.Atom("q", stl.HalfPlane((1.0,), 1.0))
R = stl.Atom("r", stl.HalfPlane((-1.0,), -1.0))


def template_formulas():
    """The fixed depth-<=3 template set for the exhaustive checks."""
    return [
        P,
        Q,
        stl.Not(P),
        stl.Always(0, 2, P),
        stl.Eventually(1, 3, Q),
        stl.And((P, Q)),
        stl.Or((P, R)),
        stl.Until(0, 2, P, Q),
        stl.Always(0, 2, stl.Or((P, Q))),
        stl.Eventually(0, 2, stl.And((P, R))),
        stl.Not(stl.Always(0, 2, P)),
        stl.Always(0, 1, stl.Eventually(0, 2, P)),
        stl.Eventually(0, 2, stl.Always(0, 1, Q)),
        stl.Until(1, 3, stl.Not(P), Q),
        stl.Always(0, 2, stl.Not(Q)),
        stl.And((stl.Until(0, 2, P, Q), stl.Eventually(0, 3, P))),
        stl.Until(0, 2, stl.And((P, R)), stl.Or((P, Q))),
        stl.Not(stl.Until(0, 3, P, Q)),
    ]


def enumerate_signals(min_len, max_len, grid=(-2.0, -1.0, 0.0, 1.0, 2.0)):
    for length in range(min_len, max_len + 1):
        for values in itertools.product(grid, repeat=length):
            yield np.array(values)[:, None]


def minmax_fanin(phi):
    """Largest min/max fan-in anywhere in the evaluation of phi."""
    if isinstance(phi, (stl.TrueFormula, stl.Atom)):
        return 1
    if isinstance(phi, stl.Not):
        return minmax_fanin(phi.child)
    if isinstance(phi, (stl.And, stl.Or)):
        return max(len(phi.children), *(minmax_fanin(c) for c in phi.children))
    if isinstance(phi, (stl.Always, stl.Eventually)):
        return max(phi.b - phi.a + 1, minmax_fanin(phi.child))
    if isinstance(phi, stl.Until):
        # outer max over the window; widest inner min has 1 + b prior terms
        return max(phi.b - phi.a + 1, 1 + phi.b,
                   minmax_fanin(phi.left), minmax_fanin(phi.right))
    raise TypeError(f"not a formula: {phi!r}")


def minmax_depth(phi):
    """Deepest nesting of min/max operators along any path."""
    if isinstance(phi, (stl.TrueFormula, stl.Atom)):
        return 0
    if isinstance(phi, stl.Not):
        return minmax_depth(phi.child)
    if isinstance(phi, (stl.And, stl.Or)):
        return 1 + max(minmax_depth(c) for c in phi.children)
    if isinstance(phi, (stl.Always, stl.Eventually)):
        return 1 + minmax_depth(phi.child)
    if isinstance(phi, stl.Until):
        return 2 + max(minmax_depth(phi.left), minmax_depth(phi.right))
    raise TypeError(f"not a formula: {phi!r}")
