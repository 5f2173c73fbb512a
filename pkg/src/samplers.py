import logging
import math
from dataclasses import dataclass, field
from typing import Any, List, Optional, Sequence

import numpy as np
from scipy.special import expit

from src.errors import InputError, NumericError
from src.score_models import GaussBernoulliRbm, GaussianModel, MixtureModel, ScoreModel

logger = logging.getLogger(__name__)

MASK64 = (1 << 64) - 1
LOW_ACCEPTANCE = 0.05
DEFAULT_GIBBS_ITERS = 1000


def splitmix64(value: int) -> int:
    z = (value + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(base_seed: int, *indices: int) -> int:
    """Seed for a sub-task; depends only on the base seed and the task indices, never on scheduling."""
    seed = int(base_seed) & MASK64
    for index in indices:
        seed = splitmix64(seed ^ splitmix64(int(index) & MASK64))
    return seed


def _rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(int(seed) & MASK64)


def sample_gaussian(model: GaussianModel, n: int, seed: int) -> np.ndarray:
    if n < 1:
        raise InputError(f"Sample count must be >= 1, got {n}")
    noise = _rng(seed).standard_normal((n, model.dim))
    samples = model.mu + noise @ model.cov_chol.T
    if not np.all(np.isfinite(samples)):
        raise NumericError("Gaussian sampling produced non-finite values")
    return samples


@dataclass
class MalaConfig:
    step_size: float
    n_steps: int = 1
    burn_in: int = 500
    init: Optional[Any] = None
    n_chains: int = 1

    def __post_init__(self):
        if not self.step_size > 0:
            raise InputError(f"MALA step_size must be > 0, got {self.step_size}")
        if self.n_steps < 1:
            raise InputError(f"MALA n_steps must be >= 1, got {self.n_steps}")
        if self.burn_in < 0 or self.n_chains < 1:
            raise InputError("MALA burn_in must be >= 0 and n_chains >= 1")

    @classmethod
    def default_for(cls, d: int, init: Optional[Sequence[float]] = None, **overrides) -> "MalaConfig":
        params = {"step_size": 0.1 * d ** (-1.0 / 3.0), "n_steps": 1, "burn_in": 500, "init": init}
        params.update({key: value for key, value in overrides.items() if value is not None})
        return cls(**params)


@dataclass
class MalaRun:
    samples: np.ndarray
    acceptance_rate: float
    warnings: List[str] = field(default_factory=list)


def _log_proposal(to: np.ndarray, frm: np.ndarray, grad_frm: np.ndarray, eps: float) -> np.ndarray:
    diff = to - frm - 0.5 * eps * eps * grad_frm
    return -np.sum(diff * diff, axis=1) / (2.0 * eps * eps)


def mala_sample(model: ScoreModel, cfg: MalaConfig, n: int, seed: int) -> MalaRun:
    if n < 1:
        raise InputError(f"Sample count must be >= 1, got {n}")
    rng = _rng(seed)
    d = model.dim
    chains = cfg.n_chains
    per_chain = math.ceil(n / chains)
    eps = float(cfg.step_size)

    init = model.mean() if cfg.init is None else np.asarray(cfg.init, dtype=np.float64)
    if init.shape == (d,):
        current = np.tile(init, (chains, 1))
    elif init.shape == (chains, d):
        current = np.array(init)
    else:
        raise InputError(f"MALA init must have shape ({d},) or ({chains}, {d}), got {init.shape}")

    current_logp = model._log_density(current)
    current_grad = model._grad(current)

    total_steps = cfg.burn_in + per_chain * cfg.n_steps
    collected = np.empty((per_chain, chains, d))
    accepted = 0
    kept = 0

    for step in range(total_steps):
        proposal = current + 0.5 * eps * eps * current_grad + eps * rng.standard_normal((chains, d))
        with np.errstate(over="ignore", invalid="ignore"):
            proposal_logp = model._log_density(proposal)
            proposal_grad = model._grad(proposal)
            log_alpha = (
                proposal_logp
                - current_logp
                + _log_proposal(current, proposal, proposal_grad, eps)
                - _log_proposal(proposal, current, current_grad, eps)
            )
        finite = np.isfinite(log_alpha) & np.all(np.isfinite(proposal_grad), axis=1)
        accept = finite & (np.log(rng.random(chains)) < np.where(finite, log_alpha, -np.inf))

        current = np.where(accept[:, None], proposal, current)
        current_logp = np.where(accept, proposal_logp, current_logp)
        current_grad = np.where(accept[:, None], proposal_grad, current_grad)
        accepted += int(accept.sum())

        if step >= cfg.burn_in and (step - cfg.burn_in + 1) % cfg.n_steps == 0:
            collected[kept] = current
            kept += 1

    rate = accepted / float(total_steps * chains)
    warnings: List[str] = []
    if rate < LOW_ACCEPTANCE:
        message = f"MALA acceptance rate {rate:.3f} below {LOW_ACCEPTANCE} (step_size={eps})"
        logger.warning(message)
        warnings.append(message)
    else:
        logger.debug("MALA finished: %s samples, acceptance=%.3f", n, rate)

    return MalaRun(samples=collected.reshape(per_chain * chains, d)[:n], acceptance_rate=rate, warnings=warnings)


def rbm_gibbs_sample(model: GaussBernoulliRbm, n: int, iters: int = DEFAULT_GIBBS_ITERS, seed: int = 0) -> np.ndarray:
    """n independent chains, one visible sample per chain after `iters` sweeps (unit visible variance)."""
    if n < 1 or iters < 1:
        raise InputError(f"Gibbs sampling needs n >= 1 and iters >= 1, got n={n} iters={iters}")
    rng = _rng(seed)
    W = model.W
    visible = model.b + rng.standard_normal((n, model.dim))
    for _ in range(iters):
        hidden = (rng.random((n, model.hidden_dim)) < expit(visible @ W + model.c)).astype(np.float64)
        visible = model.b + hidden @ W.T + rng.standard_normal((n, model.dim))
    return visible


def sample_model(
    model: ScoreModel,
    n: int,
    seed: int,
    mala: Optional[MalaConfig] = None,
    gibbs_iters: int = DEFAULT_GIBBS_ITERS,
) -> np.ndarray:
    """Exact where possible: Gaussian draws, Gibbs for RBMs, component selection for normalized mixtures, MALA otherwise."""
    if isinstance(model, GaussianModel):
        return sample_gaussian(model, n, seed)
    if isinstance(model, GaussBernoulliRbm):
        return rbm_gibbs_sample(model, n, gibbs_iters, seed)
    if isinstance(model, MixtureModel) and model.has_normalized_density:
        counts = _rng(seed).multinomial(n, model.weights)
        rng = _rng(derive_seed(seed, len(model.basis)))
        parts = [
            sample_model(component, int(count), derive_seed(seed, index), mala, gibbs_iters)
            for index, (component, count) in enumerate(zip(model.basis, counts))
            if count > 0
        ]
        stacked = np.concatenate(parts, axis=0)
        return stacked[rng.permutation(n)]
    cfg = mala or MalaConfig.default_for(model.dim, init=model.mean())
    return mala_sample(model, cfg, n, seed).samples


@dataclass
class StreamSpec:
    pre_model: ScoreModel
    post_model: ScoreModel
    nu: float
    length: int
    seed: int

    def __post_init__(self):
        if self.length < 1:
            raise InputError(f"Stream length must be >= 1, got {self.length}")
        if not (self.nu == math.inf or (float(self.nu).is_integer() and self.nu >= 1)):
            raise InputError(f"Change point nu must be an integer >= 1 or inf, got {self.nu}")
        if self.pre_model.dim != self.post_model.dim:
            raise InputError("Pre- and post-change models must share dimension")

    @property
    def pre_count(self) -> int:
        if self.nu == math.inf:
            return self.length
        return int(min(self.nu - 1, self.length))


def generate_stream(
    spec: StreamSpec, mala: Optional[MalaConfig] = None, gibbs_iters: int = DEFAULT_GIBBS_ITERS
) -> np.ndarray:
    """Rows 1..nu-1 from the pre-change model, rows nu..length from the post-change model."""
    pre_count = spec.pre_count
    post_count = spec.length - pre_count
    parts = []
    if pre_count > 0:
        parts.append(sample_model(spec.pre_model, pre_count, derive_seed(spec.seed, 0), mala, gibbs_iters))
    if post_count > 0:
        parts.append(sample_model(spec.post_model, post_count, derive_seed(spec.seed, 1), mala, gibbs_iters))
    return np.concatenate(parts, axis=0)
