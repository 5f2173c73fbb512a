from dataclasses import asdict, dataclass
from typing import Any, Dict

import numpy as np

from src.errors import InputError
from src.score_models import GaussianModel, ScoreModel, as_samples


DEFAULT_MC_SAMPLES = 10_000


@dataclass(frozen=True)
class DivergenceEstimate:
    value: float
    std_error: float
    n_samples: int

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _summarize(integrand: np.ndarray) -> DivergenceEstimate:
    n = integrand.shape[0]
    std_error = float(np.std(integrand, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return DivergenceEstimate(value=float(np.mean(integrand)), std_error=std_error, n_samples=n)


def _check_samples(samples, dim: int) -> np.ndarray:
    raw = np.asarray(samples, dtype=np.float64)
    if raw.size == 0:
        raise InputError("Divergence estimate needs at least one sample")
    X = as_samples(raw, dim)
    if X.shape[1] != dim:
        raise InputError(f"Samples have dimension {X.shape[1]}, models have {dim}")
    return X


def fisher_divergence_mc(p_model: ScoreModel, q_model: ScoreModel, samples) -> DivergenceEstimate:
    """E_P ||grad log p - grad log q||^2 from samples drawn from P."""
    if p_model.dim != q_model.dim:
        raise InputError("Fisher divergence needs models of equal dimension")
    X = _check_samples(samples, p_model.dim)
    diff = p_model.grad_log_density(X) - q_model.grad_log_density(X)
    return _summarize(np.sum(diff * diff, axis=1))


def fisher_divergence_gaussian(p: GaussianModel, q: GaussianModel) -> float:
    # grad log p - grad log q = A x + a is affine for Gaussians
    if p.dim != q.dim:
        raise InputError("Fisher divergence needs models of equal dimension")
    A = q.cov_inv - p.cov_inv
    a = p.cov_inv @ p.mu - q.cov_inv @ q.mu
    shift = A @ p.mu + a
    return float(np.trace(A @ p.cov @ A.T) + shift @ shift)


def kl_gaussian(p: GaussianModel, q: GaussianModel) -> float:
    if p.dim != q.dim:
        raise InputError("KL divergence needs models of equal dimension")
    delta = q.mu - p.mu
    _, logdet_p = np.linalg.slogdet(p.cov)
    _, logdet_q = np.linalg.slogdet(q.cov)
    value = 0.5 * (np.trace(q.cov_inv @ p.cov) + delta @ q.cov_inv @ delta - p.dim + logdet_q - logdet_p)
    return max(float(value), 0.0)


def kl_divergence_mc(p_model: ScoreModel, q_model: ScoreModel, samples) -> DivergenceEstimate:
    if not (p_model.has_normalized_density and q_model.has_normalized_density):
        raise InputError("KL divergence needs models with normalized log-densities")
    X = _check_samples(samples, p_model.dim)
    return _summarize(p_model.log_density(X) - q_model.log_density(X))
