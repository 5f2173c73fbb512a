import numpy as np
import pytest

from src.errors import InputError, NumericError
from src.presets import mvn_m, mvn_pre, rbm
from src.score_models import (
    ConstantShiftedModel,
    ConstantWeights,
    GaussBernoulliRbm,
    GaussianModel,
    MixtureModel,
    QuarticExpModel,
    WeightedScoreField,
    grad_log_density,
    hyvarinen_score,
    laplacian_log_density,
    mixture_grad_log_density,
    mixture_laplacian_log_density,
)

GRAD_STEP = 1e-5
LAPLACIAN_STEP = 1e-4


def _families():
    pre_rbm, _ = rbm(seed=3)
    return {
        "gaussian": GaussianModel([0.2, -0.1], [[1.0, 0.5], [0.5, 1.0]]),
        "quartic_exp": QuarticExpModel(tau=1.5, mu=0.1, d=3),
        "rbm": pre_rbm,
    }


def _points(d, n=100, seed=0):
    return np.random.default_rng(seed).normal(size=(n, d))


def _fd_grad(model, X, h=GRAD_STEP):
    grads = np.zeros_like(X)
    for i in range(X.shape[1]):
        step = np.zeros(X.shape[1])
        step[i] = h
        grads[:, i] = (model.log_density(X + step) - model.log_density(X - step)) / (2.0 * h)
    return grads


def _fd_laplacian(model, X, h=LAPLACIAN_STEP):
    center = model.log_density(X)
    total = np.zeros(X.shape[0])
    for i in range(X.shape[1]):
        step = np.zeros(X.shape[1])
        step[i] = h
        total += (model.log_density(X + step) - 2.0 * center + model.log_density(X - step)) / (h * h)
    return total


def _assert_relative(actual, expected, rel):
    actual = np.asarray(actual)
    expected = np.asarray(expected)
    assert np.all(np.abs(actual - expected) <= rel * np.maximum(1.0, np.abs(expected)))


@pytest.mark.parametrize("name", ["gaussian", "quartic_exp", "rbm"])
def test_gradient_and_laplacian_match_finite_differences(name):
    model = _families()[name]
    X = _points(model.dim)

    _assert_relative(model.grad_log_density(X), _fd_grad(model, X), 1e-4)
    _assert_relative(model.laplacian_log_density(X), _fd_laplacian(model, X), 1e-4)


@pytest.mark.parametrize("name", ["gaussian", "quartic_exp", "rbm"])
def test_closed_form_hyvarinen_matches_generic_assembly(name):
    model = _families()[name]
    X = _points(model.dim, seed=1)

    np.testing.assert_allclose(model.closed_form_hyvarinen_score(X), model.hyvarinen_score(X), rtol=1e-8, atol=1e-8)


@pytest.mark.parametrize("name", ["gaussian", "quartic_exp", "rbm"])
def test_hyvarinen_score_is_half_squared_gradient_plus_laplacian(name):
    model = _families()[name]
    X = _points(model.dim, seed=2)

    grads = grad_log_density(model, X)
    expected = 0.5 * np.sum(grads * grads, axis=1) + laplacian_log_density(model, X)

    assert np.array_equal(hyvarinen_score(model, X), expected)


@pytest.mark.parametrize("name", ["gaussian", "quartic_exp", "rbm"])
def test_constant_shift_leaves_scores_bit_identical(name):
    model = _families()[name]
    shifted = ConstantShiftedModel(model, 123.456)
    X = _points(model.dim, seed=3)

    assert np.array_equal(shifted.grad_log_density(X), model.grad_log_density(X))
    assert np.array_equal(shifted.laplacian_log_density(X), model.laplacian_log_density(X))
    assert np.array_equal(shifted.hyvarinen_score(X), model.hyvarinen_score(X))
    np.testing.assert_allclose(shifted.log_density(X) - model.log_density(X), 123.456)


def test_gaussian_examples():
    model = GaussianModel([0.0], [[1.0]])

    assert model.grad_log_density([0.0])[0] == 0.0
    assert model.grad_log_density([2.0])[0] == pytest.approx(-2.0)
    assert model.hyvarinen_score([0.0]) == pytest.approx(-1.0)
    assert model.hyvarinen_score([2.0]) == pytest.approx(1.0)
    assert GaussianModel([0.0, 0.0], np.eye(2)).laplacian_log_density([3.0, -1.0]) == pytest.approx(-2.0)
    assert mvn_pre().laplacian_log_density([0.4, 0.7]) == pytest.approx(-8.0 / 3.0)


def test_quartic_gradient_example():
    model = QuarticExpModel(tau=1.0, mu=0.0, d=2)

    np.testing.assert_allclose(model.grad_log_density([1.0, 1.0]), [-6.0, -6.0])


def test_rbm_laplacian_matches_second_differences_at_arbitrary_point():
    model = GaussBernoulliRbm(W=[[0.8, -1.2], [0.3, 0.5]], b=[0.1, -0.4], c=[0.2, 0.7])
    x = np.array([[1.3, -0.6]])

    _assert_relative(model.laplacian_log_density(x), _fd_laplacian(model, x), 1e-4)


def test_mixture_gradient_matches_finite_differences_on_two_vertices():
    _, cls = mvn_m()
    mixture = MixtureModel(cls.basis, [0.5, 0.5, 0.0, 0.0])
    x = np.zeros((1, 2))

    np.testing.assert_allclose(mixture.grad_log_density(x), _fd_grad(mixture, x), rtol=0, atol=1e-5)


def test_mixture_laplacian_matches_second_differences():
    _, cls = mvn_m()
    mixture = MixtureModel(cls.basis, [0.25, 0.25, 0.25, 0.25])
    X = _points(2, n=20, seed=4)

    _assert_relative(mixture.laplacian_log_density(X), _fd_laplacian(mixture, X), 1e-4)


def test_mixture_reduces_to_component_on_vertices_and_single_element():
    _, cls = mvn_m()
    X = _points(2, n=10, seed=5)

    single = MixtureModel([cls.basis[2]], [1.0])
    vertex = MixtureModel(cls.basis, [0.0, 1.0, 0.0, 0.0])

    assert np.array_equal(single.grad_log_density(X), cls.basis[2].grad_log_density(X))
    assert np.array_equal(single.laplacian_log_density(X), cls.basis[2].laplacian_log_density(X))
    assert np.array_equal(vertex.grad_log_density(X), cls.basis[1].grad_log_density(X))
    assert np.array_equal(vertex.laplacian_log_density(X), cls.basis[1].laplacian_log_density(X))


def test_mixture_of_duplicate_components_matches_component():
    component = QuarticExpModel(tau=2.0, mu=0.05, d=2)
    mixture = MixtureModel([component, component], [0.3, 0.7])
    X = _points(2, n=10, seed=6)

    np.testing.assert_allclose(mixture_grad_log_density(mixture, X), component.grad_log_density(X), rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(
        mixture_laplacian_log_density(mixture, X), component.laplacian_log_density(X), rtol=1e-12, atol=1e-12
    )


def test_weighted_field_with_one_hot_weights_is_the_vertex():
    _, cls = mvn_m()
    field = WeightedScoreField(cls.basis, ConstantWeights([0.0, 0.0, 1.0, 0.0]))
    X = _points(2, n=10, seed=7)

    np.testing.assert_allclose(field.grad_log_density(X), cls.basis[2].grad_log_density(X))
    np.testing.assert_allclose(field.laplacian_log_density(X), cls.basis[2].laplacian_log_density(X), atol=1e-6)


def test_weighted_field_rejects_weights_off_the_simplex():
    _, cls = mvn_m()
    field = WeightedScoreField(cls.basis, ConstantWeights([0.5, 0.5, 0.5, 0.0]))

    with pytest.raises(NumericError):
        field.grad_log_density([0.0, 0.0])


def test_invalid_models_and_inputs_raise_input_errors():
    with pytest.raises(InputError):
        GaussianModel([0.0, 0.0], [[1.0, 2.0], [2.0, 1.0]])
    with pytest.raises(InputError):
        QuarticExpModel(tau=0.0, mu=0.0, d=2)
    with pytest.raises(InputError):
        GaussBernoulliRbm(W=np.zeros((2, 3)), b=np.zeros(2), c=np.zeros(2))
    with pytest.raises(InputError):
        MixtureModel([mvn_pre(), mvn_pre()], [0.6, 0.6])
    with pytest.raises(InputError):
        mvn_pre().grad_log_density([0.0, 0.0, 0.0])
    with pytest.raises(InputError):
        mvn_pre().hyvarinen_score([np.nan, 0.0])
