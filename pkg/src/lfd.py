"""Least favorable distribution search over the convex hull of a finite basis, under Fisher divergence."""

import copy
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from scipy.optimize import nnls
from scipy.special import softmax

from src.divergences import DivergenceEstimate, fisher_divergence_gaussian, fisher_divergence_mc
from src.errors import InputError, TrainingError, UsageError
from src.model_io import ModelCodec
from src.network import Adam, BetaNetwork
from src.samplers import DEFAULT_GIBBS_ITERS, MalaConfig, derive_seed, mala_sample, sample_model
from src.score_models import GaussianModel, MixtureModel, ScoreModel, WeightedScoreField, as_samples

logger = logging.getLogger(__name__)

MODES = ("closed_form", "basis_scan", "simplex", "network")
VERTEX_THRESHOLD = 0.99
CI_Z = 1.96


class UncertaintyClass:
    def __init__(self, basis: Sequence[ScoreModel], description: str = ""):
        self.basis: List[ScoreModel] = list(basis)
        if not self.basis:
            raise InputError("Uncertainty class needs at least one basis model")
        dims = {model.dim for model in self.basis}
        if len(dims) != 1:
            raise InputError(f"Uncertainty class basis disagrees on dimension: {sorted(dims)}")
        self.dim = dims.pop()
        self.description = description

    @property
    def m(self) -> int:
        return len(self.basis)

    def grads(self, X: np.ndarray) -> np.ndarray:
        return np.stack([model.grad_log_density(X) for model in self.basis], axis=1)


@dataclass
class LfdResult:
    mode: str
    lfd_model: ScoreModel
    divergence_to_pre: DivergenceEstimate
    beta_averages: np.ndarray
    selected_index: int
    vertex_estimates: List[DivergenceEstimate] = field(default_factory=list)
    flags: List[str] = field(default_factory=list)
    loss_history: List[float] = field(default_factory=list)
    network: Optional[BetaNetwork] = None
    seed: Optional[int] = None
    config: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        beta = np.asarray(self.beta_averages, dtype=np.float64)
        if np.any(beta < -1e-12) or abs(beta.sum() - 1.0) > 1e-6:
            raise InputError(f"beta_averages must be a simplex vector, got {beta.tolist()}")
        self.beta_averages = beta

    @property
    def dominant_weight(self) -> float:
        return float(self.beta_averages.max())

    def to_dict(self) -> Dict[str, Any]:
        payload: Dict[str, Any] = {
            "mode": self.mode,
            "selected_index": self.selected_index,
            "beta_averages": self.beta_averages.tolist(),
            "divergence_to_pre": self.divergence_to_pre.to_dict(),
            "vertex_estimates": [estimate.to_dict() for estimate in self.vertex_estimates],
            "flags": list(self.flags),
            "loss_history": list(self.loss_history),
            "seed": self.seed,
            "config": self.config,
        }
        if not isinstance(self.lfd_model, WeightedScoreField):
            payload["lfd_model"] = ModelCodec().encode(self.lfd_model)
        if self.network is not None:
            payload["network"] = self.network.to_dict()
        return payload


def _one_hot(m: int, index: int) -> np.ndarray:
    beta = np.zeros(m)
    beta[index] = 1.0
    return beta


def _exact(value: float) -> DivergenceEstimate:
    return DivergenceEstimate(value=float(value), std_error=0.0, n_samples=1)


def _in_convex_hull(point: np.ndarray, vertices: np.ndarray, tol: float = 1e-9) -> bool:
    # nonnegative least squares with a heavily weighted sum-to-one row
    weight = 1e3
    A = np.vstack([vertices.T, weight * np.ones(vertices.shape[0])])
    b = np.concatenate([point, [weight]])
    _, residual = nnls(A, b)
    return residual < tol


def lfd_gaussian_location(
    theta_star: GaussianModel, candidate_means: Sequence[Sequence[float]], V=None
) -> LfdResult:
    """Closest candidate mean to theta* in ||v||_V = sqrt(v^T V^-2 v); lowest index wins ties."""
    if len(candidate_means) == 0:
        raise InputError("Gaussian location LFD needs at least one candidate mean")
    V = theta_star.cov if V is None else np.asarray(V, dtype=np.float64)
    means = as_samples(candidate_means, theta_star.dim)
    if means.shape[1] != theta_star.dim:
        raise InputError(f"Candidate means have dimension {means.shape[1]}, expected {theta_star.dim}")

    flags: List[str] = []
    if _in_convex_hull(theta_star.mu, means):
        logger.warning("Pre-change mean lies in the convex hull of the candidates; LFD is not identifiable")
        flags.append("pre_in_hull")

    shared = GaussianModel(theta_star.mu, V)
    offsets = means - theta_star.mu
    distances = np.einsum("ni,ij,nj->n", offsets, shared.cov_inv_sq, offsets)
    index = int(np.argmin(distances))
    q1 = GaussianModel(means[index], V)
    pre = GaussianModel(theta_star.mu, V)
    estimates = [_exact(value) for value in distances]

    logger.info("Closed-form LFD selects candidate %s (||.||_V^2 = %.6g)", index, distances[index])
    return LfdResult(
        mode="closed_form",
        lfd_model=q1,
        divergence_to_pre=_exact(fisher_divergence_gaussian(q1, pre)),
        beta_averages=_one_hot(len(means), index),
        selected_index=index,
        vertex_estimates=estimates,
        flags=flags,
    )


def lfd_basis_scan(
    cls: UncertaintyClass,
    pre: ScoreModel,
    n_samples: int = 10_000,
    seed: int = 0,
    mala: Optional[MalaConfig] = None,
    gibbs_iters: int = DEFAULT_GIBBS_ITERS,
) -> LfdResult:
    estimates: List[DivergenceEstimate] = []
    for index, model in enumerate(cls.basis):
        samples = sample_model(model, n_samples, derive_seed(seed, index), mala, gibbs_iters)
        estimates.append(fisher_divergence_mc(model, pre, samples))

    values = np.array([estimate.value for estimate in estimates])
    errors = np.array([estimate.std_error for estimate in estimates])
    index = int(np.argmin(values))

    flags: List[str] = []
    if np.any(values <= 3.0 * errors):
        logger.warning("Some basis element is indistinguishable from the pre-change model: %s", values.tolist())
        flags.append("pre_in_class")
    if cls.m > 1:
        runner_up = int(np.argsort(values, kind="stable")[1])
        if values[index] + CI_Z * errors[index] >= values[runner_up] - CI_Z * errors[runner_up]:
            logger.warning("Basis scan is ambiguous between elements %s and %s", index, runner_up)
            flags.append("ambiguous")

    logger.info("Basis scan selects element %s (D_F=%.6g +/- %.2g)", index, values[index], errors[index])
    return LfdResult(
        mode="basis_scan",
        lfd_model=cls.basis[index],
        divergence_to_pre=estimates[index],
        beta_averages=_one_hot(cls.m, index),
        selected_index=index,
        vertex_estimates=estimates,
        flags=flags,
        seed=seed,
        config={"n_samples": n_samples, "gibbs_iters": gibbs_iters},
    )


@dataclass
class SimplexConfig:
    lr: float = 0.1
    max_epochs: int = 1000
    n_samples: int = 2000
    rel_tol: float = 1e-6
    patience: int = 50
    seed: int = 0
    gibbs_iters: int = DEFAULT_GIBBS_ITERS
    mala: Optional[MalaConfig] = None


def _field_loss(beta: np.ndarray, G: np.ndarray, g_pre: np.ndarray):
    residual = np.einsum("nm,nmd->nd", beta, G) - g_pre
    integrand = np.sum(residual * residual, axis=1)
    return integrand, residual


def _mixture_samples(cls: UncertaintyClass, weights: np.ndarray, n: int, seed: int, cfg) -> np.ndarray:
    return sample_model(MixtureModel(cls.basis, weights), n, seed, cfg.mala, cfg.gibbs_iters)


def lfd_simplex_optimize(cls: UncertaintyClass, pre: ScoreModel, config: Optional[SimplexConfig] = None) -> LfdResult:
    """Constant beta on the simplex via softmax logits and Adam, resampling P from the current mixture each epoch."""
    cfg = config or SimplexConfig()
    logits = {"theta": np.zeros(cls.m)}
    optimizer = Adam(lr=cfg.lr)

    best_loss = np.inf
    best_beta = softmax(logits["theta"])
    best_integrand = None
    history: List[float] = []
    previous = None
    since_best = 0
    flags: List[str] = []

    for epoch in range(cfg.max_epochs):
        beta = softmax(logits["theta"])
        X = _mixture_samples(cls, beta, cfg.n_samples, derive_seed(cfg.seed, epoch), cfg)
        G = cls.grads(X)
        g_pre = pre.grad_log_density(X)
        integrand, residual = _field_loss(np.broadcast_to(beta, (X.shape[0], cls.m)), G, g_pre)
        loss = float(integrand.mean())
        if not np.isfinite(loss):
            raise TrainingError("Simplex loss diverged", epoch, cfg.lr)

        if loss < best_loss:
            best_loss, best_beta, best_integrand, since_best = loss, beta.copy(), integrand, 0
        else:
            since_best += 1
        history.append(best_loss)

        if previous is not None and abs(previous - loss) <= cfg.rel_tol * max(abs(previous), 1e-300):
            break
        if since_best >= cfg.patience:
            logger.warning("Simplex optimization stalled after %s epochs; returning best-so-far", epoch + 1)
            flags.append("stalled")
            break
        previous = loss

        grad_beta = 2.0 * np.einsum("nd,nmd->m", residual, G) / X.shape[0]
        grad_theta = beta * (grad_beta - np.dot(beta, grad_beta))
        optimizer.step(logits, {"theta": grad_theta})

    estimate = DivergenceEstimate(
        value=best_loss,
        std_error=float(np.std(best_integrand, ddof=1) / np.sqrt(best_integrand.size)) if best_integrand.size > 1 else 0.0,
        n_samples=int(best_integrand.size),
    )
    index = int(np.argmax(best_beta))
    logger.info("Simplex LFD weights %s (loss=%.6g)", np.round(best_beta, 6).tolist(), best_loss)
    return LfdResult(
        mode="simplex",
        lfd_model=MixtureModel(cls.basis, best_beta / best_beta.sum()),
        divergence_to_pre=estimate,
        beta_averages=best_beta,
        selected_index=index,
        flags=flags,
        loss_history=history,
        seed=cfg.seed,
        config={"lr": cfg.lr, "max_epochs": cfg.max_epochs, "n_samples": cfg.n_samples, "patience": cfg.patience},
    )


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epochs: int = 200
    n_train: int = 5000
    n_test: int = 10_000
    seed: int = 0
    mala_step_size: Optional[float] = None
    mala_chains: int = 100
    mala_burn_in: int = 500
    refresh_burn_in: int = 50


def network_loss_and_grads(net: BetaNetwork, X: np.ndarray, G: np.ndarray, g_pre: np.ndarray):
    """Loss (1/N) sum ||sum_j beta_j(X_i) g_j(X_i) - g_pre(X_i)||^2 and its gradient for every parameter."""
    logits, activations = net.forward(X)
    beta = softmax(logits, axis=1)
    integrand, residual = _field_loss(beta, G, g_pre)
    n = X.shape[0]
    grad_beta = 2.0 * np.einsum("nd,nmd->nm", residual, G) / n
    grad_logits = beta * (grad_beta - np.sum(beta * grad_beta, axis=1, keepdims=True))
    return float(integrand.mean()), net.backward(activations, grad_logits), integrand, beta


def lfd_network_train(
    cls: UncertaintyClass,
    pre: ScoreModel,
    net: Optional[BetaNetwork] = None,
    train_config: Optional[TrainConfig] = None,
) -> LfdResult:
    cfg = train_config or TrainConfig()
    net = net or BetaNetwork(cls.dim, cls.m, seed=cfg.seed)
    if net.d != cls.dim or net.m != cls.m:
        raise InputError(f"BetaNetwork shape ({net.d}->{net.m}) does not match class ({cls.dim}->{cls.m})")

    optimizer = Adam(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
    step_size = cfg.mala_step_size or 0.1 * cls.dim ** (-1.0 / 3.0)
    chains = min(cfg.mala_chains, cfg.n_train)

    weights = np.full(cls.m, 1.0 / cls.m)
    chain_state = pre.mean()
    burn_in = cfg.mala_burn_in
    best_loss = np.inf
    best_params = copy.deepcopy(net.params)
    history: List[float] = []
    warnings: List[str] = []

    for epoch in range(cfg.epochs):
        target = MixtureModel(cls.basis, weights)
        run = mala_sample(
            target,
            MalaConfig(step_size=step_size, burn_in=burn_in, init=chain_state, n_chains=chains),
            cfg.n_train,
            derive_seed(cfg.seed, epoch),
        )
        warnings.extend(run.warnings)
        X = run.samples
        chain_state = X[-chains:]
        burn_in = cfg.refresh_burn_in

        G = cls.grads(X)
        g_pre = pre.grad_log_density(X)
        loss, grads, _, beta = network_loss_and_grads(net, X, G, g_pre)
        if not np.isfinite(loss):
            raise TrainingError("Network loss is not finite", epoch, cfg.lr)

        if loss < best_loss:
            best_loss = loss
            best_params = copy.deepcopy(net.params)
        history.append(best_loss)

        optimizer.step(net.params, grads)
        weights = beta.mean(axis=0)
        weights = weights / weights.sum()

        if epoch % 20 == 0:
            logger.info("LFD network epoch %s loss=%.6g beta_avg=%s", epoch, loss, np.round(weights, 4).tolist())

    net.params = best_params
    test_run = mala_sample(
        MixtureModel(cls.basis, weights),
        MalaConfig(step_size=step_size, burn_in=cfg.mala_burn_in, init=chain_state, n_chains=chains),
        cfg.n_test,
        derive_seed(cfg.seed, cfg.epochs),
    )
    X_test = test_run.samples
    loss, _, integrand, beta_test = network_loss_and_grads(net, X_test, cls.grads(X_test), pre.grad_log_density(X_test))
    beta_averages = beta_test.mean(axis=0)
    beta_averages = beta_averages / beta_averages.sum()

    flags = ["low_acceptance"] if warnings or test_run.warnings else []
    logger.info("LFD network finished: test loss=%.6g beta_avg=%s", loss, beta_averages.tolist())
    return LfdResult(
        mode="network",
        lfd_model=WeightedScoreField(cls.basis, net),
        divergence_to_pre=DivergenceEstimate(
            value=loss,
            std_error=float(np.std(integrand, ddof=1) / np.sqrt(integrand.size)),
            n_samples=int(integrand.size),
        ),
        beta_averages=beta_averages,
        selected_index=int(np.argmax(beta_averages)),
        flags=flags,
        loss_history=history,
        network=net,
        seed=cfg.seed,
        config={
            "lr": cfg.lr,
            "betas": [cfg.beta1, cfg.beta2],
            "epochs": cfg.epochs,
            "n_train": cfg.n_train,
            "n_test": cfg.n_test,
            "hidden": list(net.hidden),
            "mala_step_size": step_size,
            "mala_chains": chains,
        },
    )


def detection_lfd(result: LfdResult, cls: UncertaintyClass, threshold: float = VERTEX_THRESHOLD) -> ScoreModel:
    """Model handed to the detector: the dominant vertex when beta concentrates, else the constant-weight mixture."""
    if result.dominant_weight >= threshold:
        return cls.basis[int(np.argmax(result.beta_averages))]
    return MixtureModel(cls.basis, result.beta_averages)


def identify_lfd(
    mode: str,
    cls: UncertaintyClass,
    pre: ScoreModel,
    seed: int = 0,
    n_samples: int = 10_000,
    simplex: Optional[SimplexConfig] = None,
    train: Optional[TrainConfig] = None,
    mala: Optional[MalaConfig] = None,
    gibbs_iters: int = DEFAULT_GIBBS_ITERS,
) -> LfdResult:
    if mode == "closed_form":
        gaussians = [model for model in cls.basis if isinstance(model, GaussianModel)]
        if not isinstance(pre, GaussianModel) or len(gaussians) != cls.m:
            raise UsageError("closed_form mode needs Gaussian pre-change and basis models", "mode")
        if any(not np.allclose(model.cov, pre.cov) for model in gaussians):
            raise UsageError("closed_form mode needs a covariance shared by all models", "mode")
        return lfd_gaussian_location(pre, [model.mu for model in gaussians], pre.cov)
    if mode == "basis_scan":
        return lfd_basis_scan(cls, pre, n_samples, seed, mala, gibbs_iters)
    if mode == "simplex":
        cfg = simplex or SimplexConfig(seed=seed, gibbs_iters=gibbs_iters, mala=mala)
        return lfd_simplex_optimize(cls, pre, cfg)
    if mode == "network":
        cfg = train or TrainConfig(seed=seed)
        return lfd_network_train(cls, pre, BetaNetwork(cls.dim, cls.m, seed=cfg.seed), cfg)
    raise UsageError(f"unknown LFD mode {mode!r}; choose one of {', '.join(MODES)}", "mode")
