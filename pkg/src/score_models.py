"""Unnormalized statistical models exposing the gradient and Laplacian of their log-density."""

from abc import ABC, abstractmethod
from typing import Callable, List, Optional, Sequence

import numpy as np
from scipy.special import expit, logsumexp

from src.errors import InputError, NumericError


EIGENVALUE_TOLERANCE = 1e-10
INVERSE_TOLERANCE = 1e-8
SIMPLEX_TOLERANCE = 1e-12
FIELD_SIMPLEX_TOLERANCE = 1e-6


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=np.float64, copy=True)
    array.setflags(write=False)
    return array


def _check_finite(values: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(values)):
        bad = np.argwhere(~np.isfinite(values))[0]
        raise NumericError(f"Non-finite {what}", where=tuple(int(i) for i in bad))
    return values


def as_samples(values, dim: int) -> np.ndarray:
    """Rows of observations; a flat sequence is n scalar observations when dim == 1, else one observation."""
    X = np.asarray(values, dtype=np.float64)
    if X.ndim == 0:
        return X.reshape(1, 1)
    if X.ndim == 1:
        return X.reshape(-1, 1) if dim == 1 else X.reshape(1, -1)
    return X


class ScoreModel(ABC):
    """Batch-aware interface: inputs are (d,) or (n, d); outputs keep the leading axis."""

    kind: str = "abstract"

    @property
    @abstractmethod
    def dim(self) -> int: ...

    @abstractmethod
    def _log_density(self, X: np.ndarray) -> np.ndarray: ...

    @abstractmethod
    def _grad(self, X: np.ndarray) -> np.ndarray: ...

    @abstractmethod
    def _laplacian(self, X: np.ndarray) -> np.ndarray: ...

    def _as_batch(self, x) -> tuple:
        X = np.asarray(x, dtype=np.float64)
        single = X.ndim == 1
        if single:
            X = X[np.newaxis, :]
        if X.ndim != 2 or X.shape[1] != self.dim:
            raise InputError(f"Expected input of dimension {self.dim} for {self.kind} model, got shape {np.shape(x)}")
        if not np.all(np.isfinite(X)):
            raise InputError(f"Input contains non-finite values for {self.kind} model")
        return X, single

    def log_density(self, x):
        X, single = self._as_batch(x)
        out = self._log_density(X)
        return out[0] if single else out

    def grad_log_density(self, x):
        X, single = self._as_batch(x)
        out = _check_finite(self._grad(X), f"{self.kind} gradient")
        return out[0] if single else out

    def laplacian_log_density(self, x):
        X, single = self._as_batch(x)
        out = _check_finite(self._laplacian(X), f"{self.kind} Laplacian")
        return out[0] if single else out

    def hyvarinen_score(self, x):
        X, single = self._as_batch(x)
        grad = _check_finite(self._grad(X), f"{self.kind} gradient")
        lap = _check_finite(self._laplacian(X), f"{self.kind} Laplacian")
        out = 0.5 * np.sum(grad * grad, axis=1) + lap
        return out[0] if single else out

    def mean(self) -> np.ndarray:
        return np.zeros(self.dim)

    @property
    def has_normalized_density(self) -> bool:
        return False


class GaussianModel(ScoreModel):
    kind = "gaussian"

    def __init__(self, mu: Sequence[float], cov):
        mu = np.atleast_1d(np.asarray(mu, dtype=np.float64))
        cov = np.atleast_2d(np.asarray(cov, dtype=np.float64))
        d = mu.shape[0]
        if mu.ndim != 1 or cov.shape != (d, d):
            raise InputError(f"Gaussian mean of length {d} needs a {d}x{d} covariance, got {cov.shape}")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(cov))):
            raise InputError("Gaussian parameters must be finite")
        if not np.allclose(cov, cov.T, rtol=0.0, atol=1e-12):
            raise InputError("Gaussian covariance must be symmetric")
        eigenvalues = np.linalg.eigvalsh(cov)
        if eigenvalues.min() <= EIGENVALUE_TOLERANCE:
            raise InputError(f"Gaussian covariance is not positive-definite (min eigenvalue {eigenvalues.min():.3e})")

        cov_inv = np.linalg.inv(cov)
        cov_inv = 0.5 * (cov_inv + cov_inv.T)
        if not np.allclose(cov_inv @ cov, np.eye(d), rtol=0.0, atol=INVERSE_TOLERANCE):
            raise InputError("Gaussian covariance is numerically singular")

        self.mu = _frozen(mu)
        self.cov = _frozen(cov)
        self.cov_inv = _frozen(cov_inv)
        self.cov_inv_sq = _frozen(cov_inv @ cov_inv)
        self.cov_chol = _frozen(np.linalg.cholesky(cov))
        _, logdet = np.linalg.slogdet(cov)
        self.log_normalizer = 0.5 * (d * np.log(2.0 * np.pi) + logdet)

    @property
    def dim(self) -> int:
        return self.mu.shape[0]

    @property
    def has_normalized_density(self) -> bool:
        return True

    def mean(self) -> np.ndarray:
        return np.array(self.mu)

    def _log_density(self, X: np.ndarray) -> np.ndarray:
        centered = X - self.mu
        return -0.5 * np.einsum("ni,ij,nj->n", centered, self.cov_inv, centered) - self.log_normalizer

    def _grad(self, X: np.ndarray) -> np.ndarray:
        return -(X - self.mu) @ self.cov_inv

    def _laplacian(self, X: np.ndarray) -> np.ndarray:
        return np.full(X.shape[0], -np.trace(self.cov_inv))

    def closed_form_hyvarinen_score(self, x):
        X, single = self._as_batch(x)
        centered = X - self.mu
        out = 0.5 * np.einsum("ni,ij,nj->n", centered, self.cov_inv_sq, centered) - np.trace(self.cov_inv)
        return out[0] if single else out


class QuarticExpModel(ScoreModel):
    """p(x) proportional to exp(-tau (sum_i u_i^4 + sum_{i<j} u_i^2 u_j^2)), u = x - mu."""

    kind = "quartic_exp"

    def __init__(self, tau: float, mu: float, d: int):
        if not np.isfinite(tau) or tau <= 0:
            raise InputError(f"quartic_exp tau must be > 0, got {tau}")
        if int(d) < 1:
            raise InputError(f"quartic_exp dimension must be >= 1, got {d}")
        if not np.isfinite(mu):
            raise InputError("quartic_exp mu must be finite")
        self.tau = float(tau)
        self.mu = float(mu)
        self.d = int(d)

    @property
    def dim(self) -> int:
        return self.d

    def mean(self) -> np.ndarray:
        return np.full(self.d, self.mu)

    def _log_density(self, X: np.ndarray) -> np.ndarray:
        sq = (X - self.mu) ** 2
        total = np.sum(sq, axis=1)
        quartic = np.sum(sq * sq, axis=1)
        cross = 0.5 * (total * total - quartic)
        return -self.tau * (quartic + cross)

    def _grad(self, X: np.ndarray) -> np.ndarray:
        u = X - self.mu
        sq = u * u
        others = np.sum(sq, axis=1, keepdims=True) - sq
        return -self.tau * (4.0 * u * sq + 2.0 * u * others)

    def _laplacian(self, X: np.ndarray) -> np.ndarray:
        sq = (X - self.mu) ** 2
        others = np.sum(sq, axis=1, keepdims=True) - sq
        return -self.tau * np.sum(12.0 * sq + 2.0 * others, axis=1)

    def closed_form_hyvarinen_score(self, x):
        X, single = self._as_batch(x)
        u = X - self.mu
        sq = u * u
        others = np.sum(sq, axis=1, keepdims=True) - sq
        first = -self.tau * (4.0 * u ** 3 + 2.0 * u * others)
        second = -self.tau * (12.0 * sq + 2.0 * others)
        out = np.sum(0.5 * first ** 2 + second, axis=1)
        return out[0] if single else out


class GaussBernoulliRbm(ScoreModel):
    """Visible density exp(-F(x)) with F(x) = 0.5||x - b||^2 - sum_j softplus(x W_j + c_j)."""

    kind = "rbm"

    def __init__(self, W, b, c):
        W = np.atleast_2d(np.asarray(W, dtype=np.float64))
        b = np.atleast_1d(np.asarray(b, dtype=np.float64))
        c = np.atleast_1d(np.asarray(c, dtype=np.float64))
        if W.shape != (b.shape[0], c.shape[0]):
            raise InputError(f"RBM weight shape {W.shape} inconsistent with biases b={b.shape} c={c.shape}")
        for name, value in (("W", W), ("b", b), ("c", c)):
            if not np.all(np.isfinite(value)):
                raise InputError(f"RBM parameter {name} has non-finite entries")
        self.W = _frozen(W)
        self.b = _frozen(b)
        self.c = _frozen(c)
        self._W_sq_col = _frozen(np.sum(W * W, axis=0))

    @property
    def dim(self) -> int:
        return self.b.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.c.shape[0]

    def mean(self) -> np.ndarray:
        return np.array(self.b)

    def _pre_activation(self, X: np.ndarray) -> np.ndarray:
        return X @ self.W + self.c

    def _log_density(self, X: np.ndarray) -> np.ndarray:
        softplus = np.logaddexp(0.0, self._pre_activation(X))
        return -0.5 * np.sum((X - self.b) ** 2, axis=1) + np.sum(softplus, axis=1)

    def _grad(self, X: np.ndarray) -> np.ndarray:
        phi = expit(self._pre_activation(X))
        return -(X - self.b) + phi @ self.W.T

    def _laplacian(self, X: np.ndarray) -> np.ndarray:
        phi = expit(self._pre_activation(X))
        return (phi * (1.0 - phi)) @ self._W_sq_col - self.dim

    def closed_form_hyvarinen_score(self, x):
        X, single = self._as_batch(x)
        phi = expit(self._pre_activation(X))
        residual = X - self.b - phi @ self.W.T
        curvature = (phi * (1.0 - phi)) @ (self.W * self.W).T
        out = np.sum(0.5 * residual ** 2 + curvature - 1.0, axis=1)
        return out[0] if single else out


class ConstantShiftedModel(ScoreModel):
    """Adds a constant to the wrapped model's log-density; scores never see it."""

    def __init__(self, base: ScoreModel, shift: float):
        self.base = base
        self.shift = float(shift)
        self.kind = base.kind

    @property
    def dim(self) -> int:
        return self.base.dim

    def mean(self) -> np.ndarray:
        return self.base.mean()

    def _log_density(self, X: np.ndarray) -> np.ndarray:
        return self.base._log_density(X) + self.shift

    def _grad(self, X: np.ndarray) -> np.ndarray:
        return self.base._grad(X)

    def _laplacian(self, X: np.ndarray) -> np.ndarray:
        return self.base._laplacian(X)


def _check_shared_dim(basis: Sequence[ScoreModel]) -> int:
    if len(basis) < 1:
        raise InputError("Basis must contain at least one model")
    dims = {model.dim for model in basis}
    if len(dims) != 1:
        raise InputError(f"Basis models disagree on dimension: {sorted(dims)}")
    return dims.pop()


class MixtureModel(ScoreModel):
    """Convex combination sum_i w_i p_i.

    Weights act on each basis model's log_density as exposed. Gaussians expose
    normalized densities; for families with an unknown normalizer the effective
    convex weights differ from w by normalizer ratios, and the mixture still lies
    in the hull of the basis.
    """

    kind = "mixture"

    def __init__(self, basis: Sequence[ScoreModel], weights: Sequence[float]):
        self.basis: List[ScoreModel] = list(basis)
        self._dim = _check_shared_dim(self.basis)
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (len(self.basis),):
            raise InputError(f"Mixture needs {len(self.basis)} weights, got shape {weights.shape}")
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > SIMPLEX_TOLERANCE:
            raise InputError(f"Mixture weights must lie on the simplex, got {weights.tolist()}")
        self.weights = _frozen(weights)
        with np.errstate(divide="ignore"):
            self._log_weights = _frozen(np.log(weights))

    @property
    def dim(self) -> int:
        return self._dim

    @property
    def has_normalized_density(self) -> bool:
        return all(model.has_normalized_density for model in self.basis)

    def mean(self) -> np.ndarray:
        return np.sum([w * model.mean() for w, model in zip(self.weights, self.basis)], axis=0)

    def _vertex(self) -> Optional[int]:
        hits = np.flatnonzero(self.weights == 1.0)
        return int(hits[0]) if hits.size else None

    def _joint_log(self, X: np.ndarray) -> np.ndarray:
        columns = [model._log_density(X) for model in self.basis]
        return np.stack(columns, axis=1) + self._log_weights

    def responsibilities(self, X: np.ndarray) -> np.ndarray:
        joint = self._joint_log(X)
        norm = logsumexp(joint, axis=1, keepdims=True)
        if not np.all(np.isfinite(norm)):
            row = int(np.flatnonzero(~np.isfinite(norm[:, 0]))[0])
            raise NumericError("All mixture components underflow", where=X[row].tolist())
        return np.exp(joint - norm)

    def _log_density(self, X: np.ndarray) -> np.ndarray:
        return logsumexp(self._joint_log(X), axis=1)

    def _component_grads(self, X: np.ndarray) -> np.ndarray:
        return np.stack([model._grad(X) for model in self.basis], axis=1)

    def _grad(self, X: np.ndarray) -> np.ndarray:
        vertex = self._vertex()
        if vertex is not None:
            return self.basis[vertex]._grad(X)
        u = self.responsibilities(X)
        return np.einsum("nm,nmd->nd", u, self._component_grads(X))

    def _laplacian(self, X: np.ndarray) -> np.ndarray:
        vertex = self._vertex()
        if vertex is not None:
            return self.basis[vertex]._laplacian(X)
        u = self.responsibilities(X)
        grads = self._component_grads(X)
        laps = np.stack([model._laplacian(X) for model in self.basis], axis=1)
        mean_grad = np.einsum("nm,nmd->nd", u, grads)
        spread = np.sum((grads - mean_grad[:, np.newaxis, :]) ** 2, axis=2)
        # sum_i u_i (lap_i + |g_i|^2) - |g_bar|^2 written as a weighted spread
        return np.sum(u * laps, axis=1) + np.sum(u * spread, axis=1)


class ConstantWeights:
    def __init__(self, weights: Sequence[float]):
        self.weights = _frozen(weights)

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return np.broadcast_to(self.weights, (X.shape[0], self.weights.shape[0]))


class WeightedScoreField(ScoreModel):
    """Score field sum_i beta_i(x) grad log p_i(x); it has no log-density of its own."""

    kind = "weighted_field"
    LAPLACIAN_STEP = 1e-4

    def __init__(self, basis: Sequence[ScoreModel], beta_fn: Callable[[np.ndarray], np.ndarray]):
        self.basis: List[ScoreModel] = list(basis)
        self._dim = _check_shared_dim(self.basis)
        self.beta_fn = beta_fn

    @property
    def dim(self) -> int:
        return self._dim

    def beta(self, X: np.ndarray) -> np.ndarray:
        beta = np.asarray(self.beta_fn(X), dtype=np.float64)
        if beta.shape != (X.shape[0], len(self.basis)):
            raise InputError(f"beta_fn returned shape {beta.shape}, expected {(X.shape[0], len(self.basis))}")
        if np.any(beta < 0) or np.any(np.abs(beta.sum(axis=1) - 1.0) > FIELD_SIMPLEX_TOLERANCE):
            raise NumericError("beta_fn left the simplex")
        return beta

    def _log_density(self, X: np.ndarray) -> np.ndarray:
        raise InputError("A weighted score field has no log-density; use a MixtureModel for sampling")

    def _grad(self, X: np.ndarray) -> np.ndarray:
        grads = np.stack([model._grad(X) for model in self.basis], axis=1)
        return np.einsum("nm,nmd->nd", self.beta(X), grads)

    def _laplacian(self, X: np.ndarray) -> np.ndarray:
        # divergence of the field by central differences; beta(x) is not differentiated analytically
        h = self.LAPLACIAN_STEP
        total = np.zeros(X.shape[0])
        for i in range(self._dim):
            step = np.zeros(self._dim)
            step[i] = h
            total += (self._grad(X + step)[:, i] - self._grad(X - step)[:, i]) / (2.0 * h)
        return total


def grad_log_density(model: ScoreModel, x):
    return model.grad_log_density(x)


def laplacian_log_density(model: ScoreModel, x):
    return model.laplacian_log_density(x)


def hyvarinen_score(model: ScoreModel, x):
    return model.hyvarinen_score(x)


def mixture_grad_log_density(mix: MixtureModel, x):
    return mix.grad_log_density(x)


def mixture_laplacian_log_density(mix: MixtureModel, x):
    return mix.laplacian_log_density(x)
