"""Discrete-time control-barrier-function filter over the learned model.

The filter solves, at each step, the minimally-invasive problem

    min_u (u - u_raw)' Q (u - u_raw)
    s.t.  b(x + F_det(x, u)) + (alpha - 1) b(x) >= margin_mult * sigma(u)
          u in the control box,

where sigma is the first-order propagation of the model covariance through
the barrier gradient, re-evaluated at each iterate's predicted point.  The
nonlinear constraint is handled by SQP: linearize, solve the resulting
box-constrained weighted least squares exactly (the problem is tiny), and
repeat.  If no iterate satisfies the true constraint, the filter falls back
to the control that maximizes the constraint value inside the box and flags
the step.

The ``model`` argument is anything exposing ``delta_det(x, u)`` and
``jac_u_det(x, u)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np


class SafetyError(Exception):
    pass


@dataclass
class BarrierSpec:
    """Disk barrier b(x) with analytic gradient over the position coordinates.

    kind "outside_disk": b = ||p - c||^2 - r^2 (keep out of the disk).
    kind "inside_disk":  b = r^2 - ||p - c||^2 (stay inside the disk).
    """

    kind: str
    center: np.ndarray
    radius: float
    alpha: float
    weights: np.ndarray  # diagonal of Q, the control-deviation weights
    margin_mult: float = 2.0
    dims: tuple = (0, 1)

    def __post_init__(self):
        if self.kind not in ("outside_disk", "inside_disk"):
            raise SafetyError(f"unknown barrier kind {self.kind!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise SafetyError("alpha must lie in [0, 1]")
        self.center = np.asarray(self.center, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if np.any(self.weights <= 0.0):
            raise SafetyError("deviation weights must be positive")

    def value(self, x):
        p = np.asarray(x, dtype=np.float64)[list(self.dims)]
        d2 = float(np.sum((p - self.center) ** 2))
        if self.kind == "outside_disk":
            return d2 - self.radius ** 2
        return self.radius ** 2 - d2

    def grad(self, x):
        x = np.asarray(x, dtype=np.float64)
        g = np.zeros_like(x)
        p = x[list(self.dims)]
        gp = 2.0 * (p - self.center)
        if self.kind == "inside_disk":
            gp = -gp
        for i, d in enumerate(self.dims):
            g[d] = gp[i]
        return g

    def to_dict(self):
        return {
            "kind": self.kind, "center": [float(v) for v in self.center],
            "radius": self.radius, "alpha": self.alpha,
            "weights": [float(v) for v in self.weights],
            "margin_mult": self.margin_mult, "dims": list(self.dims),
        }

    @classmethod
    def from_dict(cls, blob):
        return cls(kind=blob["kind"], center=blob["center"], radius=blob["radius"],
                   alpha=blob["alpha"], weights=blob["weights"],
                   margin_mult=blob["margin_mult"], dims=tuple(blob["dims"]))


def error_variance(barrier, sigma, x_pred):
    """Variance of the barrier perturbation: (db/dx) Sigma (db/dx)' at x_pred."""
    g = barrier.grad(x_pred)
    return float(g @ np.asarray(sigma, dtype=np.float64) @ g)


@dataclass
class SafeControlResult:
    u: np.ndarray
    slack: float
    iterations: int
    status: str  # "unmodified" | "adjusted" | "infeasible-fallback"


def _qp_box_halfplane(r, q, g, hmin, lo, hi):
    """Exact minimizer of sum q_i (u_i - r_i)^2 s.t. g.u >= hmin, lo <= u <= hi.

    Enumerates active sets over the box faces (the problem has <= 2 variables
    in this artifact).  Returns None when the constraint cannot be met inside
    the box.
    """
    u_box = np.clip(r, lo, hi)
    if float(g @ u_box) >= hmin - 1e-12:
        return u_box

    m = len(r)
    best, best_cost = None, np.inf
    for combo in product((0, 1, 2), repeat=m):  # 0 free, 1 at lo, 2 at hi
        u = np.empty(m)
        free = []
        for i, c in enumerate(combo):
            if c == 0:
                free.append(i)
            else:
                u[i] = lo[i] if c == 1 else hi[i]
        if free:
            # equality g.u = hmin on the free coordinates
            rhs = hmin - sum(g[i] * u[i] for i in range(m) if i not in free)
            gf = np.array([g[i] for i in free])
            qf = np.array([q[i] for i in free])
            rf = np.array([r[i] for i in free])
            denom = float(np.sum(gf * gf / qf))
            if denom < 1e-14:
                continue
            nu = (rhs - float(gf @ rf)) / denom
            uf = rf + nu * gf / qf
            for idx, i in enumerate(free):
                u[i] = uf[idx]
            if np.any(u < lo - 1e-10) or np.any(u > hi + 1e-10):
                continue
            u = np.clip(u, lo, hi)
        elif float(g @ u) < hmin - 1e-12:
            continue
        cost = float(np.sum(q * (u - r) ** 2))
        if cost < best_cost - 1e-15:
            best, best_cost = u, cost
    return best


def _sqp_starts(u_raw, lo, hi):
    yield u_raw
    mid = (lo + hi) / 2.0
    yield mid
    corners = np.stack(np.meshgrid(*zip(lo, hi))).reshape(len(lo), -1).T
    yield from corners


def _fallback_max_constraint(x, model, barrier, lo, hi, grid=21):
    """Best-effort control: grid maximizer of the raw barrier constraint."""
    axes = [np.linspace(lo[i], hi[i], grid) for i in range(len(lo))]
    best_u, best_val = None, -np.inf
    base = (barrier.alpha - 1.0) * barrier.value(x)
    for u_tuple in product(*axes):
        u = np.array(u_tuple)
        val = barrier.value(x + model.delta_det(x, u)) + base
        if val > best_val:
            best_u, best_val = u, val
    return best_u


def safe_control(x, u_raw, model, barrier, sigma, control_lo, control_hi,
                 max_iter=10, tol=1e-6):
    """Minimally adjust u_raw so the barrier constraint holds on the model.

    Returns the applied control, the constraint slack at it, the SQP
    iteration count, and a status flag.
    """
    x = np.asarray(x, dtype=np.float64)
    lo = np.asarray(control_lo, dtype=np.float64)
    hi = np.asarray(control_hi, dtype=np.float64)
    u_raw = np.clip(np.asarray(u_raw, dtype=np.float64), lo, hi)
    base = (barrier.alpha - 1.0) * barrier.value(x)

    def constraint(u):
        pred = x + model.delta_det(x, u)
        sig = np.sqrt(max(error_variance(barrier, sigma, pred), 0.0))
        return barrier.value(pred) + base - barrier.margin_mult * sig

    slack0 = constraint(u_raw)
    if slack0 >= 0.0:
        return SafeControlResult(u=u_raw, slack=slack0, iterations=0,
                                 status="unmodified")

    q = barrier.weights

    def sqp_from(u_start):
        u_k = u_start
        c_k = constraint(u_k)
        used = 0
        for used in range(1, max_iter + 1):
            pred = x + model.delta_det(x, u_k)
            g = barrier.grad(pred) @ model.jac_u_det(x, u_k)
            # linearized constraint: c_k + g.(u - u_k) >= 0
            hmin = float(g @ u_k) - c_k
            u_next = _qp_box_halfplane(u_raw, q, g, hmin, lo, hi)
            if u_next is None:
                break
            step = float(np.linalg.norm(u_next - u_k))
            u_k = u_next
            c_k = constraint(u_k)
            if step < tol:
                break
        return u_k, c_k, used

    # Start at the raw output; if the SQP stalls there (for instance on a
    # zero-gradient linearization straight at the disk center), restart from
    # the box extremes.  The first feasible finish wins, so minimal-deviation
    # solutions keep priority.
    total_iter = 0
    best_u, best_c = u_raw, slack0
    for start in _sqp_starts(u_raw, lo, hi):
        u_k, c_k, used = sqp_from(start)
        total_iter += used
        if c_k > best_c:
            best_u, best_c = u_k, c_k
        if c_k >= -1e-6:
            return SafeControlResult(u=u_k, slack=c_k, iterations=total_iter,
                                     status="adjusted")

    u_fb = _fallback_max_constraint(x, model, barrier, lo, hi)
    c_fb = constraint(u_fb)
    if c_fb > best_c:
        best_u, best_c = u_fb, c_fb
    return SafeControlResult(u=best_u, slack=best_c, iterations=total_iter,
                             status="infeasible-fallback")
