import json

import numpy as np
import pytest

from stlseeker.nets import (Adam, DenseNet, FeedforwardPolicy, RecurrentPolicy,
                            NetError, policy_from_dict)


# -- dynamics net ----------------------------------------------------------

def make_net(**kw):
    return DenseNet(5, (8, 8), 3, rng=np.random.default_rng(0), **kw)


def test_zero_weight_net_outputs_zero():
    net = make_net()
    for key in net.params:
        net.params[key][:] = 0.0
    out = net.apply(np.zeros(3), np.zeros(2))
    np.testing.assert_array_equal(out, np.zeros(3))


def test_no_dropout_sampled_equals_deterministic():
    net = make_net(dropout=0.0)
    rng = np.random.default_rng(1)
    z = rng.normal(size=5)
    mask = net.sample_mask(rng)
    assert all(np.all(m == 1.0) for m in mask)
    np.testing.assert_allclose(net.forward(z, mask), net.forward(z, None))


def test_dropout_expectation_single_layer():
    # with one dropout layer the output is linear in the mask, so the
    # Monte-Carlo mean must match the deterministic-scaled output
    net = DenseNet(4, (16,), 2, dropout=0.3, rng=np.random.default_rng(2))
    rng = np.random.default_rng(3)
    z = rng.normal(size=4)
    det = net.forward(z, None)
    total = np.zeros(2)
    n = 100_000
    for _ in range(n):
        total += net.forward(z, net.sample_mask(rng))
    mc = total / n
    np.testing.assert_allclose(mc, det, rtol=0.01, atol=0.01 * np.abs(det).max())


def test_sample_mask_statistics_and_determinism():
    net = DenseNet(4, (100,), 2, dropout=0.1, rng=np.random.default_rng(0))
    rng = np.random.default_rng(5)
    draws = np.array([net.sample_mask(rng)[0] for _ in range(100)])
    assert abs(draws.mean() - 0.9) < 0.01
    m1 = net.sample_mask(np.random.default_rng(9))
    m2 = net.sample_mask(np.random.default_rng(9))
    np.testing.assert_array_equal(m1[0], m2[0])


def test_input_jacobian_matches_fd():
    net = make_net(dropout=0.2)
    rng = np.random.default_rng(6)
    z = rng.normal(size=5)
    mask = net.sample_mask(rng)
    _, cache = net.forward(z, mask, want_cache=True)
    J = net.input_jacobian(cache)
    step = 1e-6
    for j in range(5):
        bump = np.zeros(5)
        bump[j] = step
        fd = (net.forward(z + bump, mask) - net.forward(z - bump, mask)) / (2 * step)
        np.testing.assert_allclose(J[:, j], fd, atol=1e-7)


def test_batched_backward_matches_fd():
    net = make_net(dropout=0.0)
    rng = np.random.default_rng(7)
    Z = rng.normal(size=(6, 5))
    Y = rng.normal(size=(6, 3))

    def loss():
        err = net.forward_batch(Z) - Y
        return float(np.sum(err * err))

    pred, cache = net.forward_batch(Z, want_cache=True)
    grads = net.backward_batch(cache, 2.0 * (pred - Y))
    step = 1e-6
    for key in ("W0", "b1", "W2", "b2"):
        arr = net.params[key]
        flat = arr.ravel()
        idx = rng.integers(0, flat.size, size=5)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            hi = loss()
            flat[i] = orig - step
            lo = loss()
            flat[i] = orig
            assert grads[key].ravel()[i] == pytest.approx((hi - lo) / (2 * step), abs=1e-4)


def test_dense_dimension_mismatch():
    with pytest.raises(NetError, match="shape"):
        make_net().forward(np.zeros(4))


def test_dense_checkpoint_roundtrip_bit_exact():
    net = make_net(dropout=0.15)
    blob = json.loads(json.dumps(net.to_dict()))
    restored = DenseNet.from_dict(blob)
    for key, arr in net.params.items():
        np.testing.assert_array_equal(restored.params[key], arr)
    assert restored.dropout == net.dropout


# -- recurrent policy --------------------------------------------------------

def make_policy(**kw):
    kw.setdefault("hidden", 8)
    kw.setdefault("layers", 2)
    return RecurrentPolicy(3, (0.0, -1.5), (0.75, 1.5),
                           rng=np.random.default_rng(4), **kw)


def test_policy_output_inside_box():
    policy = make_policy()
    rng = np.random.default_rng(8)
    hidden = policy.initial_hidden()
    for _ in range(10_000):
        x = rng.normal(scale=5.0, size=3)
        u, hidden = policy.step(x, hidden)
        assert np.all(u >= policy.control_lo) and np.all(u <= policy.control_hi)


def test_policy_deterministic():
    policy = make_policy()
    x = np.array([0.3, -0.2, 1.0])
    u1, h1 = policy.step(x, policy.initial_hidden())
    u2, h2 = policy.step(x, policy.initial_hidden())
    np.testing.assert_array_equal(u1, u2)
    for (a1, c1), (a2, c2) in zip(h1, h2):
        np.testing.assert_array_equal(a1, a2)
        np.testing.assert_array_equal(c1, c2)


def test_policy_state_gradient_matches_fd():
    policy = make_policy()
    x = np.array([0.5, -0.3, 0.8])
    u, _, cache = policy.step(x, policy.initial_hidden(), want_cache=True)
    step = 1e-6
    for out_i in range(2):
        seed = np.zeros(2)
        seed[out_i] = 1.0
        dx, _ = policy.bptt_step(cache, seed, policy.bptt_carry_init())
        for j in range(3):
            bump = np.zeros(3)
            bump[j] = step
            hi, _ = policy.step(x + bump, policy.initial_hidden())
            lo, _ = policy.step(x - bump, policy.initial_hidden())
            fd = (hi[out_i] - lo[out_i]) / (2 * step)
            assert dx[j] == pytest.approx(fd, rel=1e-4, abs=1e-8)


@pytest.mark.parametrize("policy_cls", [RecurrentPolicy, FeedforwardPolicy])
def test_bptt_full_unroll_matches_fd(policy_cls):
    # sum of controls over a T-step unroll, differentiated wrt x_t and W
    policy = policy_cls(2, (-1.0, -1.0), (1.0, 1.0), hidden=6, layers=2,
                        rng=np.random.default_rng(10))
    rng = np.random.default_rng(11)
    T = 5
    xs = rng.normal(size=(T, 2))
    weights = rng.normal(size=(T, 2))

    def objective():
        hidden = policy.initial_hidden()
        total = 0.0
        for t in range(T):
            u, hidden = policy.step(xs[t], hidden)
            total += float(weights[t] @ u)
        return total

    caches = []
    hidden = policy.initial_hidden()
    for t in range(T):
        _, hidden, cache = policy.step(xs[t], hidden, want_cache=True)
        caches.append(cache)
    gacc = policy.zero_grads()
    carry = policy.bptt_carry_init()
    dxs = np.zeros_like(xs)
    for t in reversed(range(T)):
        dxs[t], carry = policy.bptt_step(caches[t], weights[t], carry, gacc)

    step = 1e-6
    for t in range(T):
        for j in range(2):
            xs[t, j] += step
            hi = objective()
            xs[t, j] -= 2 * step
            lo = objective()
            xs[t, j] += step
            assert dxs[t, j] == pytest.approx((hi - lo) / (2 * step),
                                              rel=1e-4, abs=1e-8)
    for key in policy.params:
        arr = policy.params[key]
        flat = arr.ravel()
        idx = rng.integers(0, flat.size, size=4)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            hi = objective()
            flat[i] = orig - step
            lo = objective()
            flat[i] = orig
            assert gacc[key].ravel()[i] == pytest.approx(
                (hi - lo) / (2 * step), rel=1e-4, abs=1e-8)


def test_policy_checkpoint_roundtrip():
    policy = make_policy()
    blob = json.loads(json.dumps(policy.to_dict()))
    restored = policy_from_dict(blob)
    assert isinstance(restored, RecurrentPolicy)
    for key, arr in policy.params.items():
        np.testing.assert_array_equal(restored.params[key], arr)
    x = np.array([1.0, 2.0, 3.0])
    u1, _ = policy.step(x, policy.initial_hidden())
    u2, _ = restored.step(x, restored.initial_hidden())
    np.testing.assert_array_equal(u1, u2)


def test_fnn_policy_box_and_statelessness():
    policy = FeedforwardPolicy(2, (-2.0, -2.0), (2.0, 2.0), hidden=8, layers=2,
                               rng=np.random.default_rng(12))
    rng = np.random.default_rng(13)
    for _ in range(1000):
        u, hidden = policy.step(rng.normal(size=2), ())
        assert hidden == ()
        assert np.all(u >= -2.0) and np.all(u <= 2.0)


# -- Adam --------------------------------------------------------------------

def test_adam_zero_gradient_keeps_params():
    params = {"w": np.array([1.0, -2.0])}
    Adam(lr=0.1).step(params, {"w": np.zeros(2)})
    np.testing.assert_array_equal(params["w"], [1.0, -2.0])


def test_adam_first_step_is_signed_lr():
    params = {"w": np.array([0.0, 0.0])}
    opt = Adam(lr=1e-3)
    opt.step(params, {"w": np.array([0.5, -3.0])})
    np.testing.assert_allclose(params["w"], [-1e-3, 1e-3], rtol=1e-4)


def test_adam_maximize_ascends_concave_quadratic():
    params = {"w": np.array([4.0])}
    opt = Adam(lr=0.05, maximize=True)
    for _ in range(500):
        grad = {"w": -2.0 * (params["w"] - 1.3)}  # d/dw of -(w-1.3)^2
        opt.step(params, grad)
    assert params["w"][0] == pytest.approx(1.3, abs=1e-2)


def test_adam_shape_mismatch():
    with pytest.raises(NetError, match="mismatch"):
        Adam().step({"w": np.zeros(2)}, {"w": np.zeros(3)})
