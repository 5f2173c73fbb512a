import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import partial
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import polars as pl
from scipy.stats import linregress

from src.detection import DetectorConfig, instantaneous_score, statistic_path, threshold_for_arl
from src.errors import EstimationError, InputError, ScoreQcdError
from src.load import SWEEP_SCHEMA, write_gnuplot_table, write_summary_json, write_sweep_csv
from src.samplers import DEFAULT_GIBBS_ITERS, MalaConfig, StreamSpec, derive_seed, generate_stream, sample_model
from src.score_models import ScoreModel, as_samples

logger = logging.getLogger(__name__)

THRESHOLD_MODES = ("analytic", "calibrated")
SWEEP_STREAMS = 1
NO_CHANGE_STREAMS = 2
DRIFT_SAMPLES = 3


@dataclass(frozen=True)
class SweepRow:
    detector: str
    true_post: str
    gamma: float
    tau: float
    trial: int
    stopping_time: Optional[int]
    delay: Optional[int]
    censored: bool

    @classmethod
    def from_stop(cls, detector, true_post, gamma, tau, trial, stopping_time: Optional[int], nu: int) -> "SweepRow":
        if stopping_time is None:
            return cls(detector, true_post, gamma, tau, trial, None, None, True)
        delay = stopping_time - nu + 1 if stopping_time >= nu else None
        return cls(detector, true_post, gamma, tau, trial, stopping_time, delay, False)

    @property
    def false_alarm(self) -> bool:
        return self.stopping_time is not None and self.delay is None

    @property
    def key(self) -> Tuple[str, float, str, int]:
        return (self.detector, self.gamma, self.true_post, self.trial)


@dataclass(frozen=True)
class ArlEstimate:
    mean: float
    std_error: float
    censored_count: int
    trials: int

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class EddEstimate:
    edd_mean: float
    std_error: float
    false_alarm_count: int
    censored_count: int
    trials: int

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class RecordLadder:
    """Times (1-based) at which the running maximum of Z strictly increases, with the new maxima."""

    times: np.ndarray
    levels: np.ndarray
    length: int

    @classmethod
    def from_path(cls, path: np.ndarray) -> "RecordLadder":
        running_max = np.maximum.accumulate(path)
        rises = np.concatenate(([True], running_max[1:] > running_max[:-1]))
        index = np.flatnonzero(rises)
        return cls(times=index + 1, levels=running_max[index], length=len(path))

    def stopping_time(self, tau: float) -> Optional[int]:
        position = int(np.searchsorted(self.levels, tau, side="left"))
        return int(self.times[position]) if position < len(self.levels) else None

    def run_length(self, tau: float) -> int:
        stop = self.stopping_time(tau)
        return self.length if stop is None else stop


@dataclass
class SweepConfig:
    detectors: Dict[str, DetectorConfig]
    gammas: List[float]
    nu: int
    stream_length: int
    trials: int
    base_seed: int
    post_truths: Dict[str, ScoreModel]
    pre: ScoreModel
    threshold_mode: str = "analytic"
    calibration_trials: int = 200
    calibration_max_len: Optional[int] = None
    arl_trials: int = 0
    arl_max_len: Optional[int] = None
    jobs: int = 1
    mala: Optional[MalaConfig] = None
    gibbs_iters: int = DEFAULT_GIBBS_ITERS

    def __post_init__(self):
        if self.trials < 1:
            raise InputError(f"Sweep trials must be >= 1, got {self.trials}")
        if not self.gammas or any(not gamma >= 1 for gamma in self.gammas):
            raise InputError(f"Sweep gammas must be nonempty and all >= 1, got {self.gammas}")
        if not self.detectors or not self.post_truths:
            raise InputError("Sweep needs at least one detector and one true post-change model")
        if not (1 <= self.nu <= self.stream_length):
            raise InputError(f"Change point nu={self.nu} must lie in [1, stream_length={self.stream_length}]")
        if self.threshold_mode not in THRESHOLD_MODES:
            raise InputError(f"threshold_mode must be one of {THRESHOLD_MODES}, got {self.threshold_mode!r}")
        if self.jobs < 1 or self.calibration_trials < 1 or self.arl_trials < 0:
            raise InputError("jobs and calibration_trials must be >= 1, arl_trials >= 0")
        for name, model in self.post_truths.items():
            if model.dim != self.pre.dim:
                raise InputError(f"True post-change model {name!r} has dimension {model.dim}, expected {self.pre.dim}")

    @property
    def no_change_horizon(self) -> int:
        return int(self.calibration_max_len or 10 * max(self.gammas))


@dataclass
class SweepResult:
    rows: List[SweepRow]
    nu: int
    stream_length: int
    detectors: List[str]
    posts: List[str]
    gammas: List[float]
    thresholds: Dict[Tuple[str, float], float]
    threshold_mode: str = "analytic"
    arl: Dict[Tuple[str, float], ArlEstimate] = field(default_factory=dict)
    failures: List[Dict[str, Any]] = field(default_factory=list)

    def to_frame(self) -> pl.DataFrame:
        if not self.rows:
            return pl.DataFrame(schema=SWEEP_SCHEMA)
        return pl.DataFrame([asdict(row) for row in self.rows], schema=SWEEP_SCHEMA)


def _map_tasks(fn: Callable, tasks: Sequence, jobs: int) -> List:
    """Results come back in task order whatever the worker count."""
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(task) for task in tasks]
    chunksize = max(1, len(tasks) // (jobs * 4))
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, tasks, chunksize=chunksize))


def score_trajectory(cfg: DetectorConfig, stream) -> np.ndarray:
    X = as_samples(stream, cfg.pre.dim)
    return statistic_path(np.atleast_1d(instantaneous_score(cfg, X)))


def trajectory_slope(path: np.ndarray) -> Tuple[float, float]:
    """Least-squares slope of Z(n) against n and its standard error."""
    if len(path) < 3:
        raise InputError("Slope needs a trajectory of at least 3 points")
    fit = linregress(np.arange(1, len(path) + 1, dtype=np.float64), path)
    return float(fit.slope), float(fit.stderr)


def _no_change_ladders(
    detectors: Dict[str, DetectorConfig],
    pre: ScoreModel,
    max_len: int,
    mala: Optional[MalaConfig],
    gibbs_iters: int,
    seed: int,
) -> Dict[str, RecordLadder]:
    stream = generate_stream(StreamSpec(pre, pre, math.inf, max_len, seed), mala, gibbs_iters)
    return {name: RecordLadder.from_path(score_trajectory(cfg, stream)) for name, cfg in detectors.items()}


def record_ladders(
    detectors: Dict[str, DetectorConfig],
    pre: ScoreModel,
    trials: int,
    max_len: int,
    base_seed: int,
    jobs: int = 1,
    mala: Optional[MalaConfig] = None,
    gibbs_iters: int = DEFAULT_GIBBS_ITERS,
) -> Dict[str, List[RecordLadder]]:
    """One no-change stream per trial, shared by every detector."""
    if trials < 1 or max_len < 1:
        raise InputError(f"No-change runs need trials >= 1 and max_len >= 1, got {trials}, {max_len}")
    seeds = [derive_seed(base_seed, NO_CHANGE_STREAMS, trial) for trial in range(trials)]
    worker = partial(_no_change_ladders, detectors, pre, max_len, mala, gibbs_iters)
    per_trial = _map_tasks(worker, seeds, jobs)
    return {name: [ladders[name] for ladders in per_trial] for name in detectors}


def _arl_from_ladders(ladders: Sequence[RecordLadder], tau: float) -> ArlEstimate:
    lengths = np.array([ladder.run_length(tau) for ladder in ladders], dtype=np.float64)
    censored = sum(1 for ladder in ladders if ladder.stopping_time(tau) is None)
    std_error = float(np.std(lengths, ddof=1) / np.sqrt(len(lengths))) if len(lengths) > 1 else 0.0
    return ArlEstimate(mean=float(lengths.mean()), std_error=std_error, censored_count=censored, trials=len(lengths))


def estimate_arl(
    cfg: DetectorConfig,
    pre: ScoreModel,
    trials: int,
    max_len: int,
    base_seed: int,
    jobs: int = 1,
    mala: Optional[MalaConfig] = None,
    gibbs_iters: int = DEFAULT_GIBBS_ITERS,
) -> ArlEstimate:
    """Mean stopping time on no-change streams; censored runs count as max_len."""
    tau = cfg.require_tau()
    ladders = record_ladders({"detector": cfg}, pre, trials, max_len, base_seed, jobs, mala, gibbs_iters)["detector"]
    estimate = _arl_from_ladders(ladders, tau)
    logger.info(
        "ARL estimate %s tau=%.6g: mean=%.4g se=%.3g censored=%s/%s",
        cfg.kind,
        tau,
        estimate.mean,
        estimate.std_error,
        estimate.censored_count,
        trials,
    )
    return estimate


def calibrate_threshold(ladders: Sequence[RecordLadder], gamma: float, rel_tol: float = 1e-10) -> float:
    """Smallest tau whose empirical no-change ARL reaches gamma, by bisection over the record ladders."""
    if not gamma >= 1:
        raise InputError(f"Target ARL must be >= 1, got {gamma}")
    if _arl_from_ladders(ladders, 0.0).mean >= gamma:
        return 0.0
    hi = max(float(ladder.levels[-1]) for ladder in ladders) * (1.0 + 1e-12) + 1e-12
    if _arl_from_ladders(ladders, hi).mean < gamma:
        raise EstimationError(
            f"no-change horizon {ladders[0].length} is too short to reach ARL {gamma}; raise calibration_max_len"
        )
    lo = 0.0
    while hi - lo > rel_tol * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        if _arl_from_ladders(ladders, mid).mean >= gamma:
            hi = mid
        else:
            lo = mid
    return hi


def _trial_rows(
    pre: ScoreModel,
    detectors: Dict[str, DetectorConfig],
    thresholds: Dict[str, List[Tuple[float, float]]],
    nu: int,
    stream_length: int,
    mala: Optional[MalaConfig],
    gibbs_iters: int,
    task: Tuple[str, ScoreModel, int, int],
) -> Tuple[List[SweepRow], List[Dict[str, Any]]]:
    post_name, post, trial, seed = task
    try:
        stream = generate_stream(StreamSpec(pre, post, nu, stream_length, seed), mala, gibbs_iters)
        rows: List[SweepRow] = []
        for name, cfg in detectors.items():
            ladder = RecordLadder.from_path(score_trajectory(cfg, stream))
            for gamma, tau in thresholds[name]:
                rows.append(SweepRow.from_stop(name, post_name, gamma, tau, trial, ladder.stopping_time(tau), nu))
        return rows, []
    except ScoreQcdError as exc:
        logger.warning("Trial %s on %s failed: %s", trial, post_name, exc)
        return [], [{"true_post": post_name, "trial": trial, "error": str(exc)}]


def _run_trials(
    pre: ScoreModel,
    detectors: Dict[str, DetectorConfig],
    thresholds: Dict[str, List[Tuple[float, float]]],
    posts: Dict[str, ScoreModel],
    nu: int,
    stream_length: int,
    trials: int,
    base_seed: int,
    jobs: int,
    mala: Optional[MalaConfig],
    gibbs_iters: int,
) -> Tuple[List[SweepRow], List[Dict[str, Any]]]:
    tasks = [
        (post_name, post, trial, derive_seed(base_seed, SWEEP_STREAMS, post_index, trial))
        for post_index, (post_name, post) in enumerate(posts.items())
        for trial in range(trials)
    ]
    worker = partial(_trial_rows, pre, detectors, thresholds, nu, stream_length, mala, gibbs_iters)
    rows: List[SweepRow] = []
    failures: List[Dict[str, Any]] = []
    for trial_rows, trial_failures in _map_tasks(worker, tasks, jobs):
        rows.extend(trial_rows)
        failures.extend(trial_failures)
    rows.sort(key=lambda row: row.key)
    return rows, failures


def summarize_delays(rows: Sequence[SweepRow], nu: int, stream_length: int) -> EddEstimate:
    """Censored trials count as stream_length - nu + 1; false alarms are excluded and counted."""
    false_alarms = sum(1 for row in rows if row.false_alarm)
    censored = sum(1 for row in rows if row.censored)
    delays = [
        stream_length - nu + 1 if row.censored else row.delay for row in rows if not row.false_alarm
    ]
    if not delays:
        raise EstimationError(f"all {len(rows)} trials raised a false alarm before nu={nu}")
    values = np.asarray(delays, dtype=np.float64)
    std_error = float(np.std(values, ddof=1) / np.sqrt(len(values))) if len(values) > 1 else 0.0
    return EddEstimate(
        edd_mean=float(values.mean()),
        std_error=std_error,
        false_alarm_count=false_alarms,
        censored_count=censored,
        trials=len(rows),
    )


def estimate_edd(
    cfg: DetectorConfig,
    pre: ScoreModel,
    post_truth: ScoreModel,
    nu: int,
    trials: int,
    stream_length: int,
    base_seed: int,
    jobs: int = 1,
    mala: Optional[MalaConfig] = None,
    gibbs_iters: int = DEFAULT_GIBBS_ITERS,
) -> EddEstimate:
    if trials < 1:
        raise InputError(f"EDD estimation needs trials >= 1, got {trials}")
    if not (1 <= nu <= stream_length):
        raise InputError(f"Change point nu={nu} must lie in [1, stream_length={stream_length}]")
    tau = cfg.require_tau()
    rows, failures = _run_trials(
        pre,
        {"detector": cfg},
        {"detector": [(math.nan, tau)]},
        {"post": post_truth},
        nu,
        stream_length,
        trials,
        base_seed,
        jobs,
        mala,
        gibbs_iters,
    )
    if failures:
        logger.warning("%s of %s EDD trials failed", len(failures), trials)
    estimate = summarize_delays(rows, nu, stream_length)
    logger.info(
        "EDD estimate %s tau=%.6g: mean=%.4g se=%.3g false_alarms=%s censored=%s",
        cfg.kind,
        tau,
        estimate.edd_mean,
        estimate.std_error,
        estimate.false_alarm_count,
        estimate.censored_count,
    )
    return estimate


def resolve_thresholds(cfg: SweepConfig) -> Tuple[Dict[Tuple[str, float], float], Dict[Tuple[str, float], ArlEstimate]]:
    thresholds: Dict[Tuple[str, float], float] = {}
    arl: Dict[Tuple[str, float], ArlEstimate] = {}
    needs_ladders = cfg.threshold_mode == "calibrated" or cfg.arl_trials > 0

    ladders: Dict[str, List[RecordLadder]] = {}
    if needs_ladders:
        trials = cfg.calibration_trials if cfg.threshold_mode == "calibrated" else cfg.arl_trials
        max_len = cfg.no_change_horizon if cfg.threshold_mode == "calibrated" else int(cfg.arl_max_len or cfg.no_change_horizon)
        ladders = record_ladders(
            cfg.detectors, cfg.pre, trials, max_len, cfg.base_seed, cfg.jobs, cfg.mala, cfg.gibbs_iters
        )

    for name in cfg.detectors:
        for gamma in cfg.gammas:
            if cfg.threshold_mode == "calibrated":
                tau = calibrate_threshold(ladders[name], gamma)
            else:
                tau = threshold_for_arl(gamma)
            thresholds[(name, gamma)] = tau
            if ladders:
                arl[(name, gamma)] = _arl_from_ladders(ladders[name], tau)
            logger.info("Threshold %s gamma=%g -> tau=%.8g (%s)", name, gamma, tau, cfg.threshold_mode)
    return thresholds, arl


def edd_vs_arl_sweep(cfg: SweepConfig) -> SweepResult:
    thresholds, arl = resolve_thresholds(cfg)
    per_detector = {name: [(gamma, thresholds[(name, gamma)]) for gamma in cfg.gammas] for name in cfg.detectors}
    rows, failures = _run_trials(
        cfg.pre,
        cfg.detectors,
        per_detector,
        cfg.post_truths,
        cfg.nu,
        cfg.stream_length,
        cfg.trials,
        cfg.base_seed,
        cfg.jobs,
        cfg.mala,
        cfg.gibbs_iters,
    )
    logger.info(
        "Sweep finished: %s rows over %s detectors x %s gammas x %s posts (%s failed trials)",
        len(rows),
        len(cfg.detectors),
        len(cfg.gammas),
        len(cfg.post_truths),
        len(failures),
    )
    return SweepResult(
        rows=rows,
        nu=cfg.nu,
        stream_length=cfg.stream_length,
        detectors=list(cfg.detectors),
        posts=list(cfg.post_truths),
        gammas=list(cfg.gammas),
        thresholds=thresholds,
        threshold_mode=cfg.threshold_mode,
        arl=arl,
        failures=failures,
    )


def summarize(result: SweepResult) -> pl.DataFrame:
    """One row per (detector, gamma, true_post) cell with EDD and, when measured, ARL statistics."""
    frame = result.to_frame()
    censored_delay = result.stream_length - result.nu + 1
    prepared = frame.with_columns(
        pl.when(pl.col("censored")).then(pl.lit(censored_delay)).otherwise(pl.col("delay")).alias("effective_delay"),
        (pl.col("stopping_time") < result.nu).fill_null(False).alias("false_alarm"),
    )
    delays = pl.col("effective_delay").filter(~pl.col("false_alarm"))
    cells = (
        prepared.group_by(["detector", "true_post", "gamma"], maintain_order=True)
        .agg(
            pl.col("tau").first(),
            pl.len().alias("trials"),
            delays.mean().cast(pl.Float64).alias("edd_mean"),
            (delays.std() / delays.count().cast(pl.Float64).sqrt()).fill_null(0.0).alias("edd_se"),
            pl.col("false_alarm").sum().cast(pl.Int64).alias("false_alarms"),
            pl.col("censored").sum().cast(pl.Int64).alias("censored"),
        )
        .sort(["detector", "gamma", "true_post"])
    )

    arl_frame = pl.DataFrame(
        [
            {"detector": name, "gamma": gamma, "arl_mean": est.mean, "arl_se": est.std_error}
            for (name, gamma), est in result.arl.items()
        ],
        schema={"detector": pl.Utf8, "gamma": pl.Float64, "arl_mean": pl.Float64, "arl_se": pl.Float64},
    )
    return cells.join(arl_frame, on=["detector", "gamma"], how="left")


def edd_linearity(summary: pl.DataFrame) -> pl.DataFrame:
    """Least-squares line EDD ~ a + b ln(gamma) per detector/post cell, with R^2."""
    records: List[Dict[str, Any]] = []
    for (detector, true_post), cell in summary.group_by(["detector", "true_post"], maintain_order=True):
        cell = cell.drop_nulls("edd_mean").sort("gamma")
        if cell.height < 2:
            continue
        x = np.log(cell["gamma"].to_numpy())
        y = cell["edd_mean"].to_numpy()
        slope, intercept = np.polyfit(x, y, 1)
        residual = float(np.sum((y - (slope * x + intercept)) ** 2))
        total = float(np.sum((y - y.mean()) ** 2))
        r_squared = 1.0 - residual / total if total > 0 else 1.0
        records.append(
            {
                "detector": detector,
                "true_post": true_post,
                "slope": float(slope),
                "intercept": float(intercept),
                "r_squared": r_squared,
                "points": cell.height,
            }
        )
    return pl.DataFrame(
        records,
        schema={
            "detector": pl.Utf8,
            "true_post": pl.Utf8,
            "slope": pl.Float64,
            "intercept": pl.Float64,
            "r_squared": pl.Float64,
            "points": pl.Int64,
        },
    )


def drift_report(cfg: SweepConfig, n_samples: int = 100_000) -> pl.DataFrame:
    """Empirical mean increment of each detector under the pre-change law and every true post-change law."""
    laws = {"pre": cfg.pre, **cfg.post_truths}
    samples = {
        law: sample_model(model, n_samples, derive_seed(cfg.base_seed, DRIFT_SAMPLES, index), cfg.mala, cfg.gibbs_iters)
        for index, (law, model) in enumerate(laws.items())
    }
    records = []
    for name, detector in cfg.detectors.items():
        for law, X in samples.items():
            scores = np.atleast_1d(instantaneous_score(detector, X))
            records.append(
                {
                    "detector": name,
                    "law": law,
                    "drift_mean": float(scores.mean()),
                    "drift_se": float(scores.std(ddof=1) / np.sqrt(len(scores))),
                    "n_samples": int(len(scores)),
                }
            )
    return pl.DataFrame(records)


def export_results(result: SweepResult, path: str, write_dat: bool = True) -> Dict[str, Path]:
    """Write sweep.csv, summary.json and optionally edd_vs_logarl.dat under the directory `path`."""
    out_dir = Path(path)
    summary = summarize(result)
    fits = edd_linearity(summary)
    outputs = {
        "csv": write_sweep_csv(result.to_frame(), out_dir / "sweep.csv"),
        "summary": write_summary_json(result, summary, fits, out_dir / "summary.json"),
    }
    if write_dat:
        outputs["dat"] = write_gnuplot_table(summary, out_dir / "edd_vs_logarl.dat")
    logger.info("Sweep results exported to %s", out_dir)
    return outputs
