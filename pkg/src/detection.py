import logging
import math
from dataclasses import asdict, dataclass, replace
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from scipy.optimize import brentq
from scipy.special import logsumexp

from src.errors import InputError, UsageError
from src.score_models import ScoreModel, as_samples

logger = logging.getLogger(__name__)

DETECTOR_KINDS = ("cusum", "scusum", "rscusum")
SCORE_KINDS = ("scusum", "rscusum")
LAMBDA_GRID_EXPONENTS = range(-10, 7)
DEFAULT_LAMBDA_MAX = 64.0
MIN_CALIBRATION_SAMPLES = 100


@dataclass(frozen=True)
class DetectorConfig:
    """SCUSUM and RSCUSUM differ only in whether post_or_lfd is the true post-change law or the LFD."""

    kind: str
    pre: ScoreModel
    post_or_lfd: ScoreModel
    lam: float = 1.0
    tau: Optional[float] = None

    def __post_init__(self):
        if self.kind not in DETECTOR_KINDS:
            raise InputError(f"Unknown detector kind {self.kind!r}; choose one of {', '.join(DETECTOR_KINDS)}")
        if self.pre.dim != self.post_or_lfd.dim:
            raise InputError("Detector pre and post models must share dimension")
        if self.kind in SCORE_KINDS and not (np.isfinite(self.lam) and self.lam > 0):
            raise InputError(f"Score-based detectors need lambda > 0, got {self.lam}")
        if self.kind == "cusum" and not (self.pre.has_normalized_density and self.post_or_lfd.has_normalized_density):
            raise InputError("CUSUM needs normalized log-densities for both models")
        if self.tau is not None and not (self.tau >= 0 and np.isfinite(self.tau)):
            raise InputError(f"Threshold tau must be finite and >= 0, got {self.tau}")

    def with_tau(self, tau: float) -> "DetectorConfig":
        return replace(self, tau=float(tau))

    def with_lambda(self, lam: float) -> "DetectorConfig":
        return replace(self, lam=float(lam))

    def require_tau(self) -> float:
        if self.tau is None:
            raise UsageError("detector threshold tau is not set", "tau")
        return self.tau


@dataclass(frozen=True)
class DetectorState:
    z: float = 0.0
    n: int = 0
    stopped_at: Optional[int] = None


@dataclass(frozen=True)
class DetectionOutcome:
    stopping_time: Optional[int]
    final_stat: float
    n_processed: int

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class LambdaCalibration:
    lambda_star: float
    residual: float
    bracket: Tuple[float, float]
    status: str
    n_samples: int = 0

    def to_dict(self) -> Dict[str, Any]:
        payload = asdict(self)
        payload["bracket"] = list(self.bracket)
        return payload


@dataclass(frozen=True)
class DriftEstimate:
    mean: float
    std_error: float
    n_samples: int


def instantaneous_score(cfg: DetectorConfig, x):
    """lam (S_H(x, pre) - S_H(x, post)) for score-based kinds; log p1(x) - log pinf(x) for CUSUM."""
    if cfg.kind == "cusum":
        return cfg.post_or_lfd.log_density(x) - cfg.pre.log_density(x)
    return cfg.lam * (cfg.pre.hyvarinen_score(x) - cfg.post_or_lfd.hyvarinen_score(x))


def step(state: DetectorState, cfg: DetectorConfig, x) -> DetectorState:
    if state.stopped_at is not None:
        raise UsageError(f"detector already stopped at n={state.stopped_at}")
    tau = cfg.require_tau()
    z = max(state.z + float(instantaneous_score(cfg, x)), 0.0)
    n = state.n + 1
    return DetectorState(z=z, n=n, stopped_at=n if z >= tau else None)


def statistic_path(increments: np.ndarray) -> np.ndarray:
    """Z(n) = max(Z(n-1) + z_n, 0) with Z(0) = 0, for every n."""
    path = np.empty(len(increments))
    z = 0.0
    for index, value in enumerate(increments.tolist()):
        z = z + value
        if z < 0.0:
            z = 0.0
        path[index] = z
    return path


def first_crossing(path: np.ndarray, tau: float) -> Optional[int]:
    hits = np.flatnonzero(path >= tau)
    return int(hits[0]) + 1 if hits.size else None


def detect_stream(cfg: DetectorConfig, stream) -> DetectionOutcome:
    X = as_samples(stream, cfg.pre.dim)
    if X.shape[0] == 0 or X.size == 0:
        raise InputError("Detection needs a nonempty stream")
    tau = cfg.require_tau()
    path = statistic_path(np.atleast_1d(instantaneous_score(cfg, X)))
    stopping_time = first_crossing(path, tau)
    if stopping_time is None:
        return DetectionOutcome(stopping_time=None, final_stat=float(path[-1]), n_processed=len(path))
    return DetectionOutcome(
        stopping_time=stopping_time, final_stat=float(path[stopping_time - 1]), n_processed=stopping_time
    )


def run_detector(cfg: DetectorConfig, stream) -> Optional[int]:
    """T = inf{n >= 1 : Z(n) >= tau}; None when the stream ends first."""
    return detect_stream(cfg, stream).stopping_time


def score_differences(pre: ScoreModel, post_or_lfd: ScoreModel, samples) -> np.ndarray:
    return np.atleast_1d(pre.hyvarinen_score(samples) - post_or_lfd.hyvarinen_score(samples))


def _log_mean_exp(diffs: np.ndarray, lam: float) -> float:
    return float(logsumexp(lam * diffs) - np.log(diffs.shape[0]))


def calibrate_lambda(
    pre_samples,
    pre: ScoreModel,
    post_or_lfd: ScoreModel,
    tol: float = 1e-8,
    lambda_max: float = DEFAULT_LAMBDA_MAX,
    min_samples: int = MIN_CALIBRATION_SAMPLES,
) -> LambdaCalibration:
    """Largest positive root of h(lam) = mean(exp(lam * d_i)) - 1 over pre-change samples, found in log-space."""
    X = as_samples(pre_samples, pre.dim)
    if X.shape[0] < min_samples:
        raise InputError(f"Lambda calibration needs at least {min_samples} pre-change samples, got {X.shape[0]}")
    if not lambda_max > 0:
        raise InputError(f"lambda_max must be > 0, got {lambda_max}")

    diffs = score_differences(pre, post_or_lfd, X)
    n = diffs.shape[0]
    grid = sorted({2.0 ** k for k in LAMBDA_GRID_EXPONENTS if 2.0 ** k < lambda_max} | {float(lambda_max)})
    full_bracket = (grid[0], grid[-1])

    if np.all(diffs == 0.0):
        logger.warning("Score differences vanish on every sample; lambda is unconstrained, using lambda_max")
        return LambdaCalibration(float(lambda_max), 0.0, full_bracket, "no_root_degenerate", n)

    values = [_log_mean_exp(diffs, lam) for lam in grid]
    for lower, upper, f_lower, f_upper in reversed(list(zip(grid[:-1], grid[1:], values[:-1], values[1:]))):
        if (f_lower < 0.0) != (f_upper < 0.0):
            root = brentq(lambda lam: _log_mean_exp(diffs, lam), lower, upper, xtol=1e-14, rtol=4 * np.finfo(float).eps, maxiter=500)
            residual = float(np.expm1(_log_mean_exp(diffs, root)))
            status = "root_found" if abs(residual) <= tol else "bracket_exhausted"
            logger.info("Calibrated lambda*=%.8g (residual=%.3e, bracket=[%g, %g])", root, residual, lower, upper)
            return LambdaCalibration(float(root), residual, (lower, upper), status, n)

    if all(value < 0.0 for value in values):
        logger.warning("h(lambda) < 0 on (0, %g]; degenerate case, using lambda_max", lambda_max)
        return LambdaCalibration(float(lambda_max), float(np.expm1(values[-1])), full_bracket, "no_root_degenerate", n)

    logger.warning("h(lambda) > 0 on the whole grid; no positive root located, using lambda=%g", grid[0])
    return LambdaCalibration(float(grid[0]), float(np.expm1(values[0])), full_bracket, "bracket_exhausted", n)


def threshold_for_arl(gamma: float) -> float:
    if not gamma >= 1:
        raise InputError(f"Target ARL must be >= 1, got {gamma}")
    return math.log(gamma)


def empirical_drift(cfg: DetectorConfig, samples) -> DriftEstimate:
    scores = np.atleast_1d(instantaneous_score(cfg, samples))
    n = scores.shape[0]
    std_error = float(np.std(scores, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return DriftEstimate(mean=float(np.mean(scores)), std_error=std_error, n_samples=n)


def exp_score_moment(cfg: DetectorConfig, samples) -> DriftEstimate:
    """Sample mean of exp(z_lambda); a held-out pre-change sample should give 1 within a few standard errors."""
    values = np.exp(np.atleast_1d(instantaneous_score(cfg, samples)))
    n = values.shape[0]
    std_error = float(np.std(values, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return DriftEstimate(mean=float(np.mean(values)), std_error=std_error, n_samples=n)


def predicted_edd(tau: float, drift: float) -> float:
    """First-order delay tau / drift; infinite when the post-change drift is not positive."""
    return tau / drift if drift > 0 else math.inf


def build_detector(
    kind: str,
    pre: ScoreModel,
    post_or_lfd: ScoreModel,
    lam: Optional[float] = None,
    tau: Optional[float] = None,
    pre_samples=None,
    calibration: Optional[Dict[str, Any]] = None,
) -> Tuple[DetectorConfig, Optional[LambdaCalibration]]:
    """Detector with lambda calibrated from pre-change samples when not given explicitly."""
    if kind == "cusum" or lam is not None:
        return DetectorConfig(kind, pre, post_or_lfd, lam=1.0 if lam is None else lam, tau=tau), None
    if pre_samples is None:
        raise UsageError("score-based detector needs lambda or pre-change samples to calibrate it", "lambda")
    result = calibrate_lambda(pre_samples, pre, post_or_lfd, **(calibration or {}))
    return DetectorConfig(kind, pre, post_or_lfd, lam=result.lambda_star, tau=tau), result


def detectors_summary(configs: List[DetectorConfig]) -> List[Dict[str, Any]]:
    return [{"kind": cfg.kind, "lambda": cfg.lam, "tau": cfg.tau} for cfg in configs]
