"""Neural building blocks: dropout dynamics net, recurrent policy, Adam.

Everything is plain numpy with hand-derived gradients.  Parameters live in
flat ``{name: ndarray}`` dicts so the optimizer, checkpoints, and the
gradient oracles can treat them uniformly.  Dropout masks are lists of
{0,1} vectors, one per hidden layer; ``mask=None`` selects the deterministic
form, where every unit stays active and dropout-layer outputs are scaled by
(1 - p_d).
"""

from __future__ import annotations

import json

import numpy as np


class NetError(Exception):
    pass


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _uniform_init(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def params_to_json(params):
    return {
        name: {"shape": list(arr.shape), "data": [float(v) for v in arr.ravel()]}
        for name, arr in params.items()
    }


def params_from_json(blob):
    out = {}
    for name, entry in blob.items():
        arr = np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
        out[name] = arr
    return out


def clone_params(params):
    return {k: v.copy() for k, v in params.items()}


class Adam:
    """Adam with bias correction; ``maximize=True`` ascends the objective."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, maximize=False):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.maximize = maximize
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for key, p in params.items():
            if p.shape != grads[key].shape:
                raise NetError(f"gradient shape mismatch for {key!r}")
            g = -grads[key] if self.maximize else grads[key]
            m = self.m.setdefault(key, np.zeros_like(p))
            v = self.v.setdefault(key, np.zeros_like(p))
            m += (1.0 - b1) * (g - m)
            v += (1.0 - b2) * (g * g - v)
            mhat = m / (1.0 - b1 ** self.t)
            vhat = v / (1.0 - b2 ** self.t)
            p -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def state_dict(self):
        return {
            "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
            "eps": self.eps, "maximize": self.maximize, "t": self.t,
            "m": params_to_json(self.m), "v": params_to_json(self.v),
        }

    @classmethod
    def from_state_dict(cls, state):
        opt = cls(lr=state["lr"], beta1=state["beta1"], beta2=state["beta2"],
                  eps=state["eps"], maximize=state["maximize"])
        opt.t = state["t"]
        opt.m = params_from_json(state["m"])
        opt.v = params_from_json(state["v"])
        return opt


class DenseNet:
    """Feedforward net with tanh hidden layers and dropout after each one.

    Used as the one-step dynamics model: input (x, u), output the predicted
    state difference.
    """

    def __init__(self, in_dim, hidden, out_dim, dropout=0.0, rng=None, init_seed=None):
        if not 0.0 <= dropout < 1.0:
            raise NetError("dropout probability must be in [0, 1)")
        self.in_dim = int(in_dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.out_dim = int(out_dim)
        self.dropout = float(dropout)
        self.init_seed = init_seed
        self.params = {}
        if rng is None:
            rng = np.random.default_rng(init_seed)
        widths = (self.in_dim,) + self.hidden + (self.out_dim,)
        for i in range(len(widths) - 1):
            self.params[f"W{i}"] = _uniform_init(rng, (widths[i + 1], widths[i]), widths[i])
            self.params[f"b{i}"] = _uniform_init(rng, (widths[i + 1],), widths[i])

    @property
    def n_layers(self):
        return len(self.hidden) + 1

    def sample_mask(self, rng):
        """Per-hidden-layer {0,1} vectors, entries i.i.d. Bernoulli(1 - p_d)."""
        keep = 1.0 - self.dropout
        return [(rng.random(h) < keep).astype(np.float64) for h in self.hidden]

    def _layer_scale(self, mask, i):
        if mask is None:
            return 1.0 - self.dropout
        return mask[i]

    def forward(self, z, mask=None, want_cache=False):
        z = np.asarray(z, dtype=np.float64)
        if z.shape != (self.in_dim,):
            raise NetError(f"expected input of shape ({self.in_dim},), got {z.shape}")
        cache = {"inputs": [], "acts": [], "scales": []} if want_cache else None
        for i in range(len(self.hidden)):
            if want_cache:
                cache["inputs"].append(z)
            a = self.params[f"W{i}"] @ z + self.params[f"b{i}"]
            h = np.tanh(a)
            s = self._layer_scale(mask, i)
            z = h * s
            if want_cache:
                cache["acts"].append(h)
                cache["scales"].append(s)
        i = len(self.hidden)
        out = self.params[f"W{i}"] @ z + self.params[f"b{i}"]
        if want_cache:
            cache["inputs"].append(z)
            return out, cache
        return out

    def apply(self, x, u, mask=None):
        """Predicted state difference for state x and control u."""
        return self.forward(np.concatenate([np.asarray(x, dtype=np.float64),
                                            np.asarray(u, dtype=np.float64)]), mask)

    def input_jacobian(self, cache):
        """d out / d input at the cached point, via the diagonal chain."""
        i = len(self.hidden)
        J = self.params[f"W{i}"].copy()
        for i in reversed(range(len(self.hidden))):
            s = cache["scales"][i] * (1.0 - cache["acts"][i] ** 2)
            J = (J * s) @ self.params[f"W{i}"]
        return J

    def forward_batch(self, Z, masks=None, want_cache=False):
        """Rows of Z are inputs; ``masks`` holds per-layer (B, h) matrices."""
        Z = np.asarray(Z, dtype=np.float64)
        cache = {"inputs": [], "acts": [], "scales": []} if want_cache else None
        for i in range(len(self.hidden)):
            if want_cache:
                cache["inputs"].append(Z)
            A = Z @ self.params[f"W{i}"].T + self.params[f"b{i}"]
            H = np.tanh(A)
            S = (1.0 - self.dropout) if masks is None else masks[i]
            Z = H * S
            if want_cache:
                cache["acts"].append(H)
                cache["scales"].append(S)
        i = len(self.hidden)
        out = Z @ self.params[f"W{i}"].T + self.params[f"b{i}"]
        if want_cache:
            cache["inputs"].append(Z)
            return out, cache
        return out

    def sample_mask_batch(self, batch, rng):
        keep = 1.0 - self.dropout
        return [(rng.random((batch, h)) < keep).astype(np.float64) for h in self.hidden]

    def backward_batch(self, cache, dOut):
        """Parameter gradients for a batched forward pass."""
        grads = {}
        D = np.asarray(dOut, dtype=np.float64)
        i = len(self.hidden)
        grads[f"W{i}"] = D.T @ cache["inputs"][i]
        grads[f"b{i}"] = D.sum(axis=0)
        D = D @ self.params[f"W{i}"]
        for i in reversed(range(len(self.hidden))):
            D = D * cache["scales"][i] * (1.0 - cache["acts"][i] ** 2)
            grads[f"W{i}"] = D.T @ cache["inputs"][i]
            grads[f"b{i}"] = D.sum(axis=0)
            if i > 0:
                D = D @ self.params[f"W{i}"]
        return grads

    def to_dict(self):
        return {
            "kind": "dense",
            "in_dim": self.in_dim,
            "hidden": list(self.hidden),
            "out_dim": self.out_dim,
            "dropout": self.dropout,
            "init_seed": self.init_seed,
            "params": params_to_json(self.params),
        }

    @classmethod
    def from_dict(cls, blob):
        if blob.get("kind") != "dense":
            raise NetError(f"expected a dense-net checkpoint, got {blob.get('kind')!r}")
        net = cls(blob["in_dim"], blob["hidden"], blob["out_dim"],
                  dropout=blob["dropout"], init_seed=blob.get("init_seed"))
        net.params = params_from_json(blob["params"])
        return net


def _squash(z, lo, half):
    return lo + half * (np.tanh(z) + 1.0)


class RecurrentPolicy:
    """Stacked LSTM controller with a tanh box squash on the output.

    The hidden state is a tuple of (h, c) pairs per layer, zero-initialized;
    controls always land inside [control_lo, control_hi] componentwise.
    """

    kind = "rnn"

    def __init__(self, state_dim, control_lo, control_hi, hidden=32, layers=2,
                 rng=None, init_seed=None):
        self.state_dim = int(state_dim)
        self.control_lo = np.asarray(control_lo, dtype=np.float64)
        self.control_hi = np.asarray(control_hi, dtype=np.float64)
        if self.control_lo.shape != self.control_hi.shape:
            raise NetError("control box bounds must have matching shapes")
        if np.any(self.control_hi <= self.control_lo):
            raise NetError("control box must have positive width")
        self.control_dim = len(self.control_lo)
        self.hidden_size = int(hidden)
        self.n_layers = int(layers)
        self.init_seed = init_seed
        self._half = (self.control_hi - self.control_lo) / 2.0
        if rng is None:
            rng = np.random.default_rng(init_seed)
        H = self.hidden_size
        self.params = {}
        in_dim = self.state_dim
        for i in range(self.n_layers):
            fan = in_dim + H
            self.params[f"l{i}.W_ih"] = _uniform_init(rng, (4 * H, in_dim), fan)
            self.params[f"l{i}.W_hh"] = _uniform_init(rng, (4 * H, H), fan)
            b = _uniform_init(rng, (4 * H,), fan)
            b[H:2 * H] = 1.0  # forget gate bias
            self.params[f"l{i}.b"] = b
            in_dim = H
        self.params["out.W"] = _uniform_init(rng, (self.control_dim, H), H)
        self.params["out.b"] = _uniform_init(rng, (self.control_dim,), H)

    def initial_hidden(self):
        H = self.hidden_size
        return tuple((np.zeros(H), np.zeros(H)) for _ in range(self.n_layers))

    def step(self, x, hidden, want_cache=False):
        """One controller step: (u_t, new hidden[, cache])."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.state_dim,):
            raise NetError(f"expected state of shape ({self.state_dim},), got {x.shape}")
        H = self.hidden_size
        inp = x
        new_hidden = []
        layer_caches = [] if want_cache else None
        for i in range(self.n_layers):
            h_prev, c_prev = hidden[i]
            a = (self.params[f"l{i}.W_ih"] @ inp
                 + self.params[f"l{i}.W_hh"] @ h_prev
                 + self.params[f"l{i}.b"])
            ig = _sigmoid(a[:H])
            fg = _sigmoid(a[H:2 * H])
            gg = np.tanh(a[2 * H:3 * H])
            og = _sigmoid(a[3 * H:])
            c = fg * c_prev + ig * gg
            tc = np.tanh(c)
            h = og * tc
            if want_cache:
                layer_caches.append((inp, h_prev, c_prev, ig, fg, gg, og, tc))
            new_hidden.append((h, c))
            inp = h
        z = self.params["out.W"] @ inp + self.params["out.b"]
        tz = np.tanh(z)
        u = _squash(z, self.control_lo, self._half)
        if want_cache:
            return u, tuple(new_hidden), {"layers": layer_caches, "h_top": inp, "tz": tz}
        return u, tuple(new_hidden)

    def bptt_carry_init(self):
        H = self.hidden_size
        return [(np.zeros(H), np.zeros(H)) for _ in range(self.n_layers)]

    def bptt_step(self, cache, du, carry, gacc=None):
        """Backward through one step: seed du on u_t, carried (dh, dc) per layer.

        Returns the gradient on x_t and the carry for step t-1.  When ``gacc``
        is given, parameter gradients accumulate into it.
        """
        H = self.hidden_size
        dz = np.asarray(du, dtype=np.float64) * self._half * (1.0 - cache["tz"] ** 2)
        if gacc is not None:
            gacc["out.W"] += np.outer(dz, cache["h_top"])
            gacc["out.b"] += dz
        dh = self.params["out.W"].T @ dz
        new_carry = [None] * self.n_layers
        for i in reversed(range(self.n_layers)):
            inp, h_prev, c_prev, ig, fg, gg, og, tc = cache["layers"][i]
            dh_total = dh + carry[i][0]
            do = dh_total * tc
            dc = dh_total * og * (1.0 - tc ** 2) + carry[i][1]
            da = np.empty(4 * H)
            da[:H] = dc * gg * ig * (1.0 - ig)
            da[H:2 * H] = dc * c_prev * fg * (1.0 - fg)
            da[2 * H:3 * H] = dc * ig * (1.0 - gg ** 2)
            da[3 * H:] = do * og * (1.0 - og)
            if gacc is not None:
                gacc[f"l{i}.W_ih"] += np.outer(da, inp)
                gacc[f"l{i}.W_hh"] += np.outer(da, h_prev)
                gacc[f"l{i}.b"] += da
            new_carry[i] = (self.params[f"l{i}.W_hh"].T @ da, dc * fg)
            dh = self.params[f"l{i}.W_ih"].T @ da
        return dh, new_carry

    def zero_grads(self):
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def to_dict(self):
        return {
            "kind": self.kind,
            "state_dim": self.state_dim,
            "hidden": self.hidden_size,
            "layers": self.n_layers,
            "control_lo": [float(v) for v in self.control_lo],
            "control_hi": [float(v) for v in self.control_hi],
            "init_seed": self.init_seed,
            "params": params_to_json(self.params),
        }

    @classmethod
    def from_dict(cls, blob):
        if blob.get("kind") != cls.kind:
            raise NetError(f"expected a {cls.kind!r} checkpoint, got {blob.get('kind')!r}")
        policy = cls(blob["state_dim"], blob["control_lo"], blob["control_hi"],
                     hidden=blob["hidden"], layers=blob["layers"],
                     init_seed=blob.get("init_seed"))
        policy.params = params_from_json(blob["params"])
        return policy


class FeedforwardPolicy:
    """Memoryless controller: tanh MLP with the same box squash and interface.

    The hidden state is an empty tuple so rollout code can treat both policy
    kinds identically.
    """

    kind = "fnn"

    def __init__(self, state_dim, control_lo, control_hi, hidden=32, layers=2,
                 rng=None, init_seed=None):
        self.state_dim = int(state_dim)
        self.control_lo = np.asarray(control_lo, dtype=np.float64)
        self.control_hi = np.asarray(control_hi, dtype=np.float64)
        self.control_dim = len(self.control_lo)
        self.hidden_size = int(hidden)
        self.n_layers = int(layers)
        self.init_seed = init_seed
        self._half = (self.control_hi - self.control_lo) / 2.0
        if rng is None:
            rng = np.random.default_rng(init_seed)
        widths = (self.state_dim,) + (self.hidden_size,) * self.n_layers \
            + (self.control_dim,)
        self.params = {}
        for i in range(len(widths) - 1):
            self.params[f"W{i}"] = _uniform_init(rng, (widths[i + 1], widths[i]), widths[i])
            self.params[f"b{i}"] = _uniform_init(rng, (widths[i + 1],), widths[i])

    def initial_hidden(self):
        return ()

    def step(self, x, hidden=(), want_cache=False):
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.state_dim,):
            raise NetError(f"expected state of shape ({self.state_dim},), got {x.shape}")
        inp = x
        inputs, acts = [], []
        for i in range(self.n_layers):
            inputs.append(inp)
            h = np.tanh(self.params[f"W{i}"] @ inp + self.params[f"b{i}"])
            acts.append(h)
            inp = h
        z = self.params[f"W{self.n_layers}"] @ inp + self.params[f"b{self.n_layers}"]
        tz = np.tanh(z)
        u = _squash(z, self.control_lo, self._half)
        if want_cache:
            return u, (), {"inputs": inputs, "acts": acts, "h_top": inp, "tz": tz}
        return u, ()

    def bptt_carry_init(self):
        return ()

    def bptt_step(self, cache, du, carry, gacc=None):
        i = self.n_layers
        dz = np.asarray(du, dtype=np.float64) * self._half * (1.0 - cache["tz"] ** 2)
        if gacc is not None:
            gacc[f"W{i}"] += np.outer(dz, cache["h_top"])
            gacc[f"b{i}"] += dz
        d = self.params[f"W{i}"].T @ dz
        for i in reversed(range(self.n_layers)):
            d = d * (1.0 - cache["acts"][i] ** 2)
            if gacc is not None:
                gacc[f"W{i}"] += np.outer(d, cache["inputs"][i])
                gacc[f"b{i}"] += d
            d = self.params[f"W{i}"].T @ d
        return d, ()

    def zero_grads(self):
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def to_dict(self):
        return {
            "kind": self.kind,
            "state_dim": self.state_dim,
            "hidden": self.hidden_size,
            "layers": self.n_layers,
            "control_lo": [float(v) for v in self.control_lo],
            "control_hi": [float(v) for v in self.control_hi],
            "init_seed": self.init_seed,
            "params": params_to_json(self.params),
        }

    @classmethod
    def from_dict(cls, blob):
        if blob.get("kind") != cls.kind:
            raise NetError(f"expected a {cls.kind!r} checkpoint, got {blob.get('kind')!r}")
        policy = cls(blob["state_dim"], blob["control_lo"], blob["control_hi"],
                     hidden=blob["hidden"], layers=blob["layers"],
                     init_seed=blob.get("init_seed"))
        policy.params = params_from_json(blob["params"])
        return policy


def policy_from_dict(blob):
    kinds = {"rnn": RecurrentPolicy, "fnn": FeedforwardPolicy}
    kind = blob.get("kind")
    if kind not in kinds:
        raise NetError(f"unknown policy kind {kind!r}")
    return kinds[kind].from_dict(blob)


def save_json(path, blob):
    with open(path, "w") as f:
        json.dump(blob, f)


def load_json(path):
    with open(path) as f:
        return json.load(f)
