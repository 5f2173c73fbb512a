import numpy as np
import pytest

from src.errors import InputError
from src.lfd import network_loss_and_grads
from src.network import Adam, BetaNetwork
from src.presets import mvn_m
from src.samplers import sample_gaussian


def _batch(n=10):
    pre, cls = mvn_m()
    X = sample_gaussian(pre, n, seed=3)
    return X, cls.grads(X), pre.grad_log_density(X)


def test_network_outputs_are_simplex_vectors():
    net = BetaNetwork(d=2, m=4, seed=0)

    beta = net(np.random.default_rng(0).normal(size=(50, 2)))

    assert beta.shape == (50, 4)
    assert np.all(beta >= 0.0)
    np.testing.assert_allclose(beta.sum(axis=1), 1.0, atol=1e-6)
    assert net.widths == [2, 128, 64, 4]


def test_single_output_network_is_constant_one():
    net = BetaNetwork(d=2, m=1, hidden=(8, 4), seed=0)

    assert np.array_equal(net(np.random.default_rng(1).normal(size=(5, 2))), np.ones((5, 1)))


def test_loss_gradients_match_finite_differences():
    net = BetaNetwork(d=2, m=4, hidden=(8, 6), seed=1)
    X, G, g_pre = _batch()
    _, grads, _, _ = network_loss_and_grads(net, X, G, g_pre)
    h = 1e-6

    for name, param in net.params.items():
        numeric = np.zeros_like(param)
        for index in np.ndindex(param.shape):
            original = param[index]
            param[index] = original + h
            upper = network_loss_and_grads(net, X, G, g_pre)[0]
            param[index] = original - h
            lower = network_loss_and_grads(net, X, G, g_pre)[0]
            param[index] = original
            numeric[index] = (upper - lower) / (2.0 * h)

        assert np.all(np.abs(grads[name] - numeric) <= 1e-4 * np.maximum(1e-3, np.abs(numeric))), name


def test_adam_first_step_moves_each_parameter_by_learning_rate():
    params = {"w": np.array([1.0, -2.0, 0.5])}
    grads = {"w": np.array([0.3, -4.0, 2.0])}

    Adam(lr=0.01).step(params, grads)

    np.testing.assert_allclose(params["w"], [0.99, -1.99, 0.49], atol=1e-8)


def test_adam_converges_on_a_quadratic():
    params = {"w": np.array([3.0, -1.0])}
    optimizer = Adam(lr=0.01)

    for _ in range(3000):
        optimizer.step(params, {"w": 2.0 * params["w"]})

    np.testing.assert_allclose(params["w"], 0.0, atol=2e-2)


def test_network_serialization_keeps_outputs():
    net = BetaNetwork(d=2, m=3, hidden=(5, 4), seed=2)
    X = np.random.default_rng(2).normal(size=(7, 2))

    restored = BetaNetwork.from_dict(net.to_dict())

    assert np.array_equal(restored(X), net(X))
    broken = net.to_dict()
    broken["params"]["W1"] = [[0.0]]
    with pytest.raises(InputError):
        BetaNetwork.from_dict(broken)
