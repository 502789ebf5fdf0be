"""Dynamics-model learning: data collection on the true plant, net training,
and dropout moment-matching covariance estimation.

Two collection modes mirror the alternating scheme: the first batch of
episodes applies uniform random controls and truncates on proximity to the
unsafe area; every later batch runs the current policy through the CBF
filter for full episodes.  Observed (noisy) states are what enter the
dataset, and the recorded difference is between consecutive observations.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .nets import Adam, DenseNet
from .safety import safe_control
from .world import Trajectory, distance_to_unsafe

INITIAL_PROVENANCE = 0


class ModelLearningError(Exception):
    pass


@dataclass
class TransitionDataset:
    """Growing record of ((x, u), delta) pairs with a per-record provenance tag
    (0 for the initial random phase, otherwise the collection cycle index)."""

    state_dim: int
    control_dim: int
    xs: np.ndarray = None
    us: np.ndarray = None
    deltas: np.ndarray = None
    provenance: np.ndarray = None

    def __post_init__(self):
        if self.xs is None:
            self.xs = np.zeros((0, self.state_dim))
            self.us = np.zeros((0, self.control_dim))
            self.deltas = np.zeros((0, self.state_dim))
            self.provenance = np.zeros(0, dtype=int)

    def __len__(self):
        return len(self.xs)

    def append(self, x, u, delta, tag):
        self.xs = np.vstack([self.xs, np.asarray(x, dtype=np.float64)])
        self.us = np.vstack([self.us, np.asarray(u, dtype=np.float64)])
        self.deltas = np.vstack([self.deltas, np.asarray(delta, dtype=np.float64)])
        self.provenance = np.append(self.provenance, int(tag))

    def extend(self, xs, us, deltas, tag):
        k = len(xs)
        if k == 0:
            return
        self.xs = np.vstack([self.xs, xs])
        self.us = np.vstack([self.us, us])
        self.deltas = np.vstack([self.deltas, deltas])
        self.provenance = np.append(self.provenance, np.full(k, int(tag)))

    def inputs(self):
        return np.hstack([self.xs, self.us])

    def input_bounds(self):
        Z = self.inputs()
        return Z.min(axis=0), Z.max(axis=0)

    def to_csv(self, path):
        n, m = self.state_dim, self.control_dim
        header = [f"x{i}" for i in range(n)] + [f"u{i}" for i in range(m)] \
            + [f"dx{i}" for i in range(n)] + ["provenance"]
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(header)
            for i in range(len(self)):
                row = [repr(float(v)) for v in self.xs[i]]
                row += [repr(float(v)) for v in self.us[i]]
                row += [repr(float(v)) for v in self.deltas[i]]
                row.append(int(self.provenance[i]))
                writer.writerow(row)

    @classmethod
    def from_csv(cls, path, state_dim, control_dim):
        ds = cls(state_dim=state_dim, control_dim=control_dim)
        rows = []
        with open(path, newline="") as f:
            reader = csv.reader(f)
            next(reader)
            rows = [row for row in reader]
        if rows:
            data = np.array([[float(v) for v in row[:-1]] for row in rows])
            n, m = state_dim, control_dim
            ds.xs = data[:, :n]
            ds.us = data[:, n:n + m]
            ds.deltas = data[:, n + m:]
            ds.provenance = np.array([int(row[-1]) for row in rows])
        return ds


def wrap_state(x, dims):
    """Wrap the listed state coordinates into [-pi, pi)."""
    if not dims:
        return np.asarray(x, dtype=np.float64)
    x = np.array(x, dtype=np.float64)
    for d in dims:
        x[d] = (x[d] + np.pi) % (2.0 * np.pi) - np.pi
    return x


@dataclass
class ModelSnapshot:
    """Trained dynamics net, constant covariance, and the loss history.

    ``wrap_dims`` lists angle coordinates canonicalized into [-pi, pi) before
    the net sees them: the one-step difference of a heading-based plant is
    periodic in the heading, and baking that in keeps the net from having to
    extrapolate over unboundedly drifting angles.  The wrap has unit
    derivative, so every Jacobian passes through unchanged.
    """

    net: DenseNet
    sigma: np.ndarray = None
    loss_history: list = field(default_factory=list)
    wrap_dims: tuple = ()

    def __post_init__(self):
        if self.sigma is None:
            self.sigma = np.zeros((self.net.out_dim, self.net.out_dim))
        self.wrap_dims = tuple(self.wrap_dims)

    def _input(self, x, u):
        return np.concatenate([wrap_state(x, self.wrap_dims),
                               np.asarray(u, dtype=np.float64)])

    def delta_det(self, x, u):
        return self.net.forward(self._input(x, u), mask=None)

    def delta(self, x, u, mask):
        return self.net.forward(self._input(x, u), mask=mask)

    def jac_u_det(self, x, u):
        _, cache = self.net.forward(self._input(x, u), mask=None, want_cache=True)
        n = len(np.asarray(x))
        return self.net.input_jacobian(cache)[:, n:]

    def jacobians(self, x, u, mask):
        """(dF/dx, dF/du) of the masked net at (x, u)."""
        _, Jx, Ju = self.delta_and_jacobians(x, u, mask)
        return Jx, Ju

    def delta_and_jacobians(self, x, u, mask):
        """Prediction and input Jacobians from one cached forward pass."""
        delta, cache = self.net.forward(self._input(x, u), mask=mask,
                                        want_cache=True)
        J = self.net.input_jacobian(cache)
        n = len(np.asarray(x))
        return delta, J[:, :n], J[:, n:]

    def sample_mask(self, rng):
        return self.net.sample_mask(rng)

    def training_inputs(self, dataset):
        """Net inputs for the dataset records, with angles canonicalized."""
        xs = dataset.xs
        if self.wrap_dims:
            xs = np.array(xs)
            for d in self.wrap_dims:
                xs[:, d] = (xs[:, d] + np.pi) % (2.0 * np.pi) - np.pi
        return np.hstack([xs, dataset.us])

    def to_dict(self):
        return {
            "net": self.net.to_dict(),
            "sigma": [[float(v) for v in row] for row in self.sigma],
            "loss_history": [float(v) for v in self.loss_history],
            "wrap_dims": list(self.wrap_dims),
        }

    @classmethod
    def from_dict(cls, blob):
        return cls(net=DenseNet.from_dict(blob["net"]),
                   sigma=np.asarray(blob["sigma"], dtype=np.float64),
                   loss_history=list(blob["loss_history"]),
                   wrap_dims=tuple(blob.get("wrap_dims", ())))


def collect_initial(plant_cfg, n_episodes, horizon, rng, dataset=None):
    """Random-control episodes truncated near the unsafe area (the bootstrap
    phase).  The transition that crossed into the stop zone is kept, tagged
    with the initial provenance."""
    if dataset is None:
        dataset = TransitionDataset(plant_cfg.state_dim, plant_cfg.control_dim)
    if len(dataset):
        raise ModelLearningError("initial collection requires an empty dataset")
    plant = plant_cfg.make_plant()
    unsafe = plant_cfg.unsafe_regions()
    trajectories = []
    for _ in range(n_episodes):
        x = plant_cfg.sample_initial(rng)
        obs = plant_cfg.observe(x, rng)
        states, controls = [x.copy()], []
        stop_index = None
        for t in range(horizon):
            u = rng.uniform(plant_cfg.control_lo, plant_cfg.control_hi)
            x_next = plant.step(x, u)
            obs_next = plant_cfg.observe(x_next, rng)
            dataset.append(obs, u, obs_next - obs, INITIAL_PROVENANCE)
            states.append(x_next.copy())
            controls.append(u)
            x, obs = x_next, obs_next
            if distance_to_unsafe(obs, unsafe) < plant_cfg.stop_distance:
                stop_index = t + 1
                break
        trajectories.append(Trajectory(
            states=np.array(states), controls=np.array(controls),
            stopped_early=stop_index is not None, stop_index=stop_index))
    return dataset, trajectories


def run_episode(plant_cfg, policy, model, barrier, rng, horizon, with_cbf=True):
    """One episode on the true plant; the policy (and the optional filter)
    consume noisy observations while the returned trajectory holds true states."""
    plant = plant_cfg.make_plant()
    x = plant_cfg.sample_initial(rng)
    hidden = policy.initial_hidden()
    states = [x.copy()]
    controls, raws, flags, slacks, statuses = [], [], [], [], []
    for _ in range(horizon):
        obs = plant_cfg.observe(x, rng)
        u_raw, hidden = policy.step(obs, hidden)
        if with_cbf:
            res = safe_control(obs, u_raw, model, barrier, model.sigma,
                               plant_cfg.control_lo, plant_cfg.control_hi)
            u, slack, status = res.u, res.slack, res.status
        else:
            u, slack, status = np.clip(u_raw, plant_cfg.control_lo,
                                       plant_cfg.control_hi), 0.0, "unmodified"
        x = plant.step(x, u)
        states.append(x.copy())
        controls.append(u)
        raws.append(np.asarray(u_raw, dtype=np.float64))
        flags.append(status != "unmodified")
        slacks.append(slack)
        statuses.append(status)
    return Trajectory(states=np.array(states), controls=np.array(controls),
                      filtered=np.array(flags, dtype=bool),
                      raw_controls=np.array(raws), slacks=np.array(slacks),
                      statuses=statuses)


def collect_with_policy(plant_cfg, policy, model, barrier, n_episodes, horizon,
                        rng, cycle, dataset):
    """Full-horizon filtered episodes appended to the dataset (NT records)."""
    trajectories = []
    for _ in range(n_episodes):
        plant = plant_cfg.make_plant()
        x = plant_cfg.sample_initial(rng)
        obs = plant_cfg.observe(x, rng)
        hidden = policy.initial_hidden()
        states, controls, raws, flags, slacks, statuses = [x.copy()], [], [], [], [], []
        for _ in range(horizon):
            u_raw, hidden = policy.step(obs, hidden)
            res = safe_control(obs, u_raw, model, barrier, model.sigma,
                               plant_cfg.control_lo, plant_cfg.control_hi)
            x_next = plant.step(x, res.u)
            obs_next = plant_cfg.observe(x_next, rng)
            dataset.append(obs, res.u, obs_next - obs, cycle)
            states.append(x_next.copy())
            controls.append(res.u)
            raws.append(np.asarray(u_raw, dtype=np.float64))
            flags.append(res.status != "unmodified")
            slacks.append(res.slack)
            statuses.append(res.status)
            x, obs = x_next, obs_next
        trajectories.append(Trajectory(
            states=np.array(states), controls=np.array(controls),
            filtered=np.array(flags, dtype=bool), raw_controls=np.array(raws),
            slacks=np.array(slacks), statuses=statuses))
    return trajectories


def train_model(dataset, net, epochs, batch_size, lr, rng, inputs=None):
    """Minibatch Adam on the squared one-step prediction error, resampling the
    dropout mask per sample per step.  Returns per-epoch mean sample losses.

    ``inputs`` overrides the raw record inputs (used for canonicalized-angle
    training via ModelSnapshot.training_inputs)."""
    if len(dataset) == 0:
        raise ModelLearningError("cannot train on an empty dataset")
    Z = dataset.inputs() if inputs is None else np.asarray(inputs)
    Y = dataset.deltas
    opt = Adam(lr=lr)
    history = []
    count = len(dataset)
    for _ in range(epochs):
        order = rng.permutation(count)
        epoch_loss = 0.0
        for start in range(0, count, batch_size):
            idx = order[start:start + batch_size]
            masks = net.sample_mask_batch(len(idx), rng) if net.dropout > 0 else None
            pred, cache = net.forward_batch(Z[idx], masks, want_cache=True)
            err = pred - Y[idx]
            epoch_loss += float(np.sum(err * err))
            grads = net.backward_batch(cache, 2.0 * err / len(idx))
            opt.step(net.params, grads)
        history.append(epoch_loss / count)
    return history


def estimate_sigma(net, input_lo, input_hi, n_inputs, n_masks, rng):
    """Constant model covariance: mean over random inputs of the output
    covariance under sampled dropout masks, symmetrized."""
    if n_masks < 2:
        raise ModelLearningError("need at least two masks per input")
    lo = np.asarray(input_lo, dtype=np.float64)
    hi = np.asarray(input_hi, dtype=np.float64)
    total = np.zeros((net.out_dim, net.out_dim))
    for _ in range(n_inputs):
        z = rng.uniform(lo, hi)
        outs = np.empty((n_masks, net.out_dim))
        for j in range(n_masks):
            outs[j] = net.forward(z, mask=net.sample_mask(rng))
        total += np.cov(outs, rowvar=False, ddof=1)
    sigma = total / n_inputs
    return (sigma + sigma.T) / 2.0
