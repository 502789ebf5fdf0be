"""Policy improvement on the learned model via co-state gradients.

Each optimization step rolls the recurrent policy through M sampled dropout
models, differentiates the smooth robustness of each model trajectory with
the co-state recursion

    lam_T = d rho / d x_T
    lam_t = d rho / d x_t + sum_{j>=t} a_j * (d u_j / d x_t)
            + lam_{t+1} * (d fhat / d x_t),         a_j = lam_{j+1} * (d fhat / d u_j)

and accumulates the per-trajectory parameter gradient
sum_t a_t * (d u_t / d W).  The cross-time terms d u_j / d x_t never appear
as explicit Jacobians: one backward sweep through the recurrent unroll with
the a_j as output seeds produces all of them at once, which is what keeps
the recursion O(T) and free of the unstable Jacobian products a direct
substitution would need.

``unrolled_gradient_oracle`` rebuilds the entire rollout-plus-robustness
computation as a single diffgraph tape with the policy parameters as leaves.
It is exact, slow, and completely independent of the hand-written backward
passes, which makes it the reference the adjoint path is tested against.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import diffgraph as dg
from . import stl
from .nets import Adam, FeedforwardPolicy, RecurrentPolicy, clone_params


class PolicyOptError(Exception):
    pass


@dataclass
class RolloutTape:
    """One model rollout with everything the backward passes need cached."""

    states: np.ndarray  # (T+1, n)
    controls: np.ndarray  # (T, m)
    mask: list
    policy_caches: list
    jac_x: list  # per step: d fhat / d x = I + dF/dx
    jac_u: list  # per step: d fhat / d u = dF/du

    @property
    def horizon(self):
        return len(self.controls)


def rollout_model(x0, policy, model, mask, horizon):
    """Roll the policy through the sampled model ``x_{t+1} = x_t + F(x_t, u_t)``
    with one fixed dropout mask along the whole trajectory."""
    n = len(x0)
    x = np.asarray(x0, dtype=np.float64)
    hidden = policy.initial_hidden()
    states = [x]
    controls, pcaches, jxs, jus = [], [], [], []
    eye = np.eye(n)
    for _ in range(horizon):
        u, hidden, pc = policy.step(x, hidden, want_cache=True)
        delta, Jx, Ju = model.delta_and_jacobians(x, u, mask)
        x = x + delta
        states.append(x)
        controls.append(u)
        pcaches.append(pc)
        jxs.append(eye + Jx)
        jus.append(Ju)
    return RolloutTape(states=np.array(states), controls=np.array(controls),
                       mask=mask, policy_caches=pcaches, jac_x=jxs, jac_u=jus)


def compute_costates(tape, rho_grad, policy):
    """Co-states lam_1..lam_T (rows of the result) for one rollout.

    ``rho_grad`` holds d rho / d x_t per absolute time row, as produced by
    the smooth robustness tape on the rolled-out states.
    """
    T = tape.horizon
    n = tape.states.shape[1]
    rho_grad = np.asarray(rho_grad, dtype=np.float64)
    if rho_grad.shape != (T + 1, n):
        raise PolicyOptError(
            f"robustness gradient shape {rho_grad.shape} != {(T + 1, n)}")
    lam = np.zeros((T + 1, n))
    lam[T] = rho_grad[T]
    carry = policy.bptt_carry_init()
    for j in reversed(range(T)):
        a = lam[j + 1] @ tape.jac_u[j]
        dx, carry = policy.bptt_step(tape.policy_caches[j], a, carry)
        if j >= 1:
            lam[j] = rho_grad[j] + dx + lam[j + 1] @ tape.jac_x[j]
    return lam[1:]


def gradient_single(tape, costates, policy):
    """Per-trajectory parameter gradient sum_t lam_{t+1} (dF/du_t)(du_t/dW)."""
    T = tape.horizon
    if len(costates) != T:
        raise PolicyOptError("costates length does not match the rollout")
    gacc = policy.zero_grads()
    carry = policy.bptt_carry_init()
    for j in reversed(range(T)):
        a = costates[j] @ tape.jac_u[j]
        _, carry = policy.bptt_step(tape.policy_caches[j], a, carry, gacc)
    return gacc


def gradient_batch(x0s, masks, policy, model, smoother):
    """Mean per-trajectory gradient over M (initial state, mask) samples.

    Returns the averaged gradient plus per-sample smooth and classical
    robustness values for monitoring.
    """
    if len(x0s) != len(masks) or not x0s:
        raise PolicyOptError("need matching, non-empty x0 and mask samples")
    total = policy.zero_grads()
    smooth_vals, classic_vals = [], []
    for x0, mask in zip(x0s, masks):
        tape = rollout_model(x0, policy, model, mask, smoother.T)
        value, G = smoother.value_and_grad(tape.states)
        costates = compute_costates(tape, G, policy)
        grad = gradient_single(tape, costates, policy)
        for key in total:
            total[key] += grad[key]
        smooth_vals.append(value)
        classic_vals.append(stl.robustness_classic(smoother.phi, tape.states))
    M = len(x0s)
    for key in total:
        total[key] /= M
    return total, smooth_vals, classic_vals


# ---------------------------------------------------------------------------
# Direct-unroll oracle on diffgraph


def _param_leaves(params):
    leaves = {}
    for name, arr in params.items():
        if arr.ndim == 2:
            leaves[name] = [dg.leaf(f"{name}#{i}", arr.shape[1])
                            for i in range(arr.shape[0])]
        else:
            leaves[name] = dg.leaf(name, len(arr))
    return leaves


def _param_leaf_values(params):
    values = {}
    for name, arr in params.items():
        if arr.ndim == 2:
            for i in range(arr.shape[0]):
                values[f"{name}#{i}"] = arr[i]
        else:
            values[name] = arr
    return values


def _reassemble_grads(params, leaf_grads):
    grads = {}
    for name, arr in params.items():
        if arr.ndim == 2:
            rows = [np.asarray(leaf_grads.get(f"{name}#{i}", np.zeros(arr.shape[1])))
                    for i in range(arr.shape[0])]
            grads[name] = np.stack(rows)
        else:
            grads[name] = np.asarray(leaf_grads.get(name, np.zeros(arr.shape)))
    return grads


def _sig_expr(z):
    return (dg.tanh(z * 0.5) + 1.0) * 0.5


def _affine_expr(rows, bias_leaf, x_expr, lo, hi):
    return dg.stack([dg.dot(rows[j], x_expr) + dg.index(bias_leaf, j)
                     for j in range(lo, hi)])


def _const_affine_expr(W, b, x_expr):
    return dg.stack([dg.dot(dg.const(W[j]), x_expr) + float(b[j])
                     for j in range(W.shape[0])])


def _model_net_expr(net, mask, xu_expr):
    z = xu_expr
    for i in range(len(net.hidden)):
        h = dg.tanh(_const_affine_expr(net.params[f"W{i}"], net.params[f"b{i}"], z))
        scale = (1.0 - net.dropout) if mask is None else mask[i]
        z = h * dg.const(scale)
    i = len(net.hidden)
    return _const_affine_expr(net.params[f"W{i}"], net.params[f"b{i}"], z)


def _squash_expr(z_expr, policy):
    half = (policy.control_hi - policy.control_lo) / 2.0
    return dg.const(policy.control_lo) + dg.const(half) * (dg.tanh(z_expr) + 1.0)


def _policy_step_expr(policy, leaves, x_expr, hidden_exprs):
    if isinstance(policy, RecurrentPolicy):
        H = policy.hidden_size
        inp = x_expr
        new_hidden = []
        for i in range(policy.n_layers):
            h_prev, c_prev = hidden_exprs[i]
            ih, hh = leaves[f"l{i}.W_ih"], leaves[f"l{i}.W_hh"]
            b = leaves[f"l{i}.b"]

            def gate(lo, hi):
                return dg.stack([dg.dot(ih[j], inp) + dg.dot(hh[j], h_prev)
                                 + dg.index(b, j) for j in range(lo, hi)])

            ig = _sig_expr(gate(0, H))
            fg = _sig_expr(gate(H, 2 * H))
            gg = dg.tanh(gate(2 * H, 3 * H))
            og = _sig_expr(gate(3 * H, 4 * H))
            c = fg * c_prev + ig * gg
            h = og * dg.tanh(c)
            new_hidden.append((h, c))
            inp = h
        z = _affine_expr(leaves["out.W"], leaves["out.b"], inp,
                         0, policy.control_dim)
        return _squash_expr(z, policy), new_hidden
    if isinstance(policy, FeedforwardPolicy):
        inp = x_expr
        for i in range(policy.n_layers):
            inp = dg.tanh(_affine_expr(leaves[f"W{i}"], leaves[f"b{i}"], inp,
                                       0, policy.hidden_size))
        i = policy.n_layers
        z = _affine_expr(leaves[f"W{i}"], leaves[f"b{i}"], inp,
                         0, policy.control_dim)
        return _squash_expr(z, policy), hidden_exprs
    raise PolicyOptError(f"no expression builder for policy {type(policy).__name__}")


def build_unrolled_tape(x0, policy, model, mask, phi, k):
    """The whole rollout + smooth robustness as one tape over parameter leaves."""
    T = stl.horizon(phi)
    leaves = _param_leaves(policy.params)
    x = dg.const(np.asarray(x0, dtype=np.float64))
    if isinstance(policy, RecurrentPolicy):
        H = policy.hidden_size
        hidden = [(dg.const(np.zeros(H)), dg.const(np.zeros(H)))
                  for _ in range(policy.n_layers)]
    else:
        hidden = ()
    states = [x]
    for _ in range(T):
        u, hidden = _policy_step_expr(policy, leaves, x, hidden)
        xu = dg.stack([x, u])
        x = x + _model_net_expr(model.net, mask, xu)
        states.append(x)
    return dg.Tape(stl.build_smooth_expr(phi, states, k))


def unrolled_gradient_oracle(x0, policy, model, mask, phi, k):
    """Exact dJ/dW by full reverse mode through the substituted constraints.

    Intended for small horizons; the adjoint path must match it to near
    machine precision.
    """
    tape = build_unrolled_tape(x0, policy, model, mask, phi, k)
    dg.forward(tape, _param_leaf_values(policy.params))
    return _reassemble_grads(policy.params, dg.backward(tape))


def adjoint_gradient(x0, policy, model, mask, smoother):
    """Convenience: rollout + co-states + per-trajectory gradient in one call."""
    tape = rollout_model(x0, policy, model, mask, smoother.T)
    value, G = smoother.value_and_grad(tape.states)
    costates = compute_costates(tape, G, policy)
    return gradient_single(tape, costates, policy), value


def finite_difference_gradient(x0, policy, model, mask, smoother, step=1e-5):
    """Central differences of the rolled-out smooth robustness over W."""
    grads = {}
    for name, arr in policy.params.items():
        g = np.zeros_like(arr)
        flat = arr.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = smoother.value(
                rollout_model(x0, policy, model, mask, smoother.T).states)
            flat[i] = orig - step
            lo = smoother.value(
                rollout_model(x0, policy, model, mask, smoother.T).states)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * step)
        grads[name] = g
    return grads


def relative_gap(a, b):
    """Max over components of |a - b| / max(1, |a|) across two grad dicts."""
    worst = 0.0
    for key in a:
        gap = np.abs(a[key] - b[key]) / np.maximum(1.0, np.abs(a[key]))
        if gap.size:
            worst = max(worst, float(np.max(gap)))
    return worst


# ---------------------------------------------------------------------------
# Randomized cross-check of the three gradient routes


def random_check_instance(rng, t_max=6, hidden_max=8):
    """A small random (policy, model, mask, formula, x0) gradient test case.

    The formula template is chosen so its horizon equals the rollout length.
    """
    from .model_learning import ModelSnapshot
    from .nets import DenseNet

    n = int(rng.integers(1, 4))
    m = int(rng.integers(1, 3))
    T = int(rng.integers(2, t_max + 1))
    hidden = int(rng.integers(3, hidden_max + 1))
    layers = int(rng.integers(1, 3))
    seed = int(rng.integers(0, 2 ** 31))
    kind = RecurrentPolicy if rng.random() < 0.8 else FeedforwardPolicy
    policy = kind(n, -np.ones(m), np.ones(m), hidden=hidden, layers=layers,
                  rng=np.random.default_rng(seed))
    dropout = float(rng.choice([0.0, 0.3]))
    net = DenseNet(n + m, (hidden,), n, dropout=dropout,
                   rng=np.random.default_rng(seed + 1))
    model = ModelSnapshot(net=net)
    mask = net.sample_mask(rng) if dropout > 0 else None

    def pred():
        coeffs = rng.uniform(-1.0, 1.0, n)
        return stl.HalfPlane(tuple(coeffs), float(rng.uniform(-0.5, 0.5)))

    p1, p2 = stl.Atom("p1", pred()), stl.Atom("p2", pred())
    template = int(rng.integers(0, 5))
    if template == 0:
        phi = stl.Eventually(0, T, p1)
    elif template == 1:
        phi = stl.Always(0, T, p1)
    elif template == 2:
        split = int(rng.integers(0, T))
        phi = stl.And((stl.Eventually(0, T, p1), stl.Always(split, T, p2)))
    elif template == 3:
        phi = stl.Not(stl.Always(0, T, stl.Or((p1, p2))))
    else:
        phi = stl.Until(0, T, p1, p2)
    x0 = rng.uniform(-1.0, 1.0, n)
    return policy, model, mask, phi, x0


def gradient_check_suite(n_instances, rng, t_max=6, hidden_max=8, k=10.0,
                         fd_step=1e-5):
    """Adjoint vs direct-unroll vs finite differences on random instances.

    Returns one dict per instance with the three pairwise max relative gaps.
    """
    results = []
    for _ in range(n_instances):
        policy, model, mask, phi, x0 = random_check_instance(
            rng, t_max=t_max, hidden_max=hidden_max)
        smoother = stl.SmoothRobustness(phi, policy.state_dim, k)
        adj, _ = adjoint_gradient(x0, policy, model, mask, smoother)
        unroll = unrolled_gradient_oracle(x0, policy, model, mask, phi, k)
        fd = finite_difference_gradient(x0, policy, model, mask, smoother,
                                        step=fd_step)
        results.append({
            "adjoint_vs_unroll": relative_gap(adj, unroll),
            "adjoint_vs_fd": relative_gap(adj, fd),
            "unroll_vs_fd": relative_gap(unroll, fd),
        })
    return results


# ---------------------------------------------------------------------------
# Policy improvement loop


@dataclass
class ImproveOptions:
    m_samples: int = 4
    k: float = 10.0
    lr: float = 1e-3
    max_steps: int = 2000
    conv_window: int = 50
    conv_tol: float = 1e-3
    divergence_margin: float = 2.0
    divergence_patience: int = 200
    grad_clip: float = 50.0  # global-norm cap on the batch gradient
    output_decay: float = 1e-3  # per-step decay of the squash pre-activation map
    val_samples: int = 8  # fixed validation rollouts used to pick the returned W
    val_every: int = 10


@dataclass
class ImproveResult:
    steps: int
    stopped: str  # "converged" | "max-steps" | "diverged"
    trace: list = field(default_factory=list)  # (step, avg smooth, avg classic, |grad|)
    best_moving_avg: float = -np.inf
    wall_time: float = 0.0


def improve_policy(model, phi, policy, x0_sampler, rng, opts=None):
    """Ascend the average smooth robustness of model rollouts (Adam).

    Fresh (x0, dropout mask) pairs are drawn every step.  Stops when the
    moving average of the objective plateaus, at the step cap, or when a
    sustained collapse below the best seen value triggers the divergence
    guard.  Whatever the stop reason, the parameters that scored best on a
    fixed validation set of rollouts are the ones left in the policy.

    Two stabilizers guard against runaway steps and pinned tanh outputs:
    a global-norm gradient clip and a tiny decoupled weight decay on the
    output map (a saturated squash has near-zero gradient, so without the
    decay a policy that latches onto extreme controls can never unlearn
    them).
    """
    opts = opts or ImproveOptions()
    smoother = stl.SmoothRobustness(phi, policy.state_dim, opts.k)
    adam = Adam(lr=opts.lr, maximize=True)
    out_keys = [k for k in policy.params if k.startswith("out.")] \
        or [f"W{policy.n_layers}", f"b{policy.n_layers}"]
    t_start = time.perf_counter()

    # A fixed validation set makes retention comparisons consistent: the
    # per-step objective is too noisy (fresh x0 and mask every step) to tell
    # a real peak from a lucky draw.
    val_set = [(x0_sampler(rng), model.sample_mask(rng))
               for _ in range(opts.val_samples)]

    def validate():
        return float(np.mean([
            smoother.value(rollout_model(x0, policy, model, mask, smoother.T).states)
            for x0, mask in val_set]))

    trace = []
    smooth_hist = []
    best_ma = -np.inf
    best_val = validate()
    best_params = clone_params(policy.params)
    collapse_streak = 0
    stopped = "max-steps"
    step = 0
    w = opts.conv_window

    for step in range(1, opts.max_steps + 1):
        x0s = [x0_sampler(rng) for _ in range(opts.m_samples)]
        masks = [model.sample_mask(rng) for _ in range(opts.m_samples)]
        grad, smooth_vals, classic_vals = gradient_batch(
            x0s, masks, policy, model, smoother)
        gnorm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grad.values())))
        if opts.grad_clip and gnorm > opts.grad_clip:
            scale = opts.grad_clip / gnorm
            grad = {k: g * scale for k, g in grad.items()}
        adam.step(policy.params, grad)
        if opts.output_decay:
            for key in out_keys:
                policy.params[key] *= 1.0 - opts.output_decay

        avg_s = float(np.mean(smooth_vals))
        avg_c = float(np.mean(classic_vals))
        smooth_hist.append(avg_s)
        trace.append((step, avg_s, avg_c, gnorm))

        if step % opts.val_every == 0:
            score = validate()
            if score > best_val:
                best_val = score
                best_params = clone_params(policy.params)

        ma = float(np.mean(smooth_hist[-w:]))
        best_ma = max(best_ma, ma)

        if avg_s < best_ma - opts.divergence_margin:
            collapse_streak += 1
            if collapse_streak >= opts.divergence_patience:
                stopped = "diverged"
                break
        else:
            collapse_streak = 0

        if len(smooth_hist) >= 2 * w:
            prev = float(np.mean(smooth_hist[-2 * w:-w]))
            if ma - prev < opts.conv_tol:
                stopped = "converged"
                break

    if validate() <= best_val:
        policy.params = best_params
    return ImproveResult(steps=step, stopped=stopped, trace=trace,
                         best_moving_avg=best_ma,
                         wall_time=time.perf_counter() - t_start)
