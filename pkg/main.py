import argparse
import json
import logging
import math
import os
import sys
import time
from dataclasses import dataclass, field, fields
from logging.handlers import RotatingFileHandler
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Sequence, Tuple

import numpy as np
import polars as pl
import requests
import yaml
from prefect import flow, get_run_logger, task
from prefect.cache_policies import NO_CACHE

from src.detection import (
    DetectorConfig,
    build_detector,
    calibrate_lambda,
    detect_stream,
    exp_score_moment,
)
from src.errors import InputError, ScoreQcdError, UsageError
from src.harness import SweepConfig, SweepResult, drift_report, edd_vs_arl_sweep, export_results, score_trajectory
from src.lfd import SimplexConfig, TrainConfig, UncertaintyClass, detection_lfd, identify_lfd
from src.load import ResultLoader, RunManifest, read_stream_csv, write_csv, write_stream_csv
from src.model_io import ModelCodec, load_model, write_json
from src.presets import load_preset
from src.quality import SweepQualityValidator
from src.samplers import MalaConfig, StreamSpec, derive_seed, generate_stream, sample_model
from src.score_models import ScoreModel

logger = logging.getLogger(__name__)

DEFAULT_SETTINGS = "config/config.yaml"
EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2

CALIBRATION_SAMPLES = 100
HELDOUT_SAMPLES = 101
TRAJECTORY_STREAMS = 4


def setup_logging(log_level: str = "INFO", log_format: str = None, log_dir: str = "logs") -> None:
    if log_format is None:
        log_format = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

    log_path = Path(log_dir)
    log_path.mkdir(parents=True, exist_ok=True)
    log_file = log_path / "score_qcd.log"

    root_logger = logging.getLogger()
    root_logger.setLevel(getattr(logging, log_level.upper(), logging.INFO))

    if root_logger.handlers:
        root_logger.handlers.clear()

    file_handler = RotatingFileHandler(log_file, maxBytes=2_000_000, backupCount=5, encoding="utf-8")
    # stdout carries command results
    stream_handler = logging.StreamHandler(sys.stderr)

    formatter = logging.Formatter(log_format)
    file_handler.setFormatter(formatter)
    stream_handler.setFormatter(formatter)

    root_logger.addHandler(file_handler)
    root_logger.addHandler(stream_handler)


def load_config(config_path: str = DEFAULT_SETTINGS) -> Dict[str, Any]:
    """YAML settings or JSON subcommand configs (JSON parses as YAML)."""
    try:
        with open(config_path, "r", encoding="utf-8") as handle:
            loaded = yaml.safe_load(handle)
    except OSError as exc:
        raise UsageError(f"cannot read config: {exc}", str(config_path)) from exc
    except yaml.YAMLError as exc:
        raise UsageError(f"invalid config: {exc}", str(config_path)) from exc
    if loaded is None:
        return {}
    if not isinstance(loaded, dict):
        raise UsageError("config must be a mapping", str(config_path))
    return loaded


def send_alert(webhook_url: str, message: str) -> None:
    if not webhook_url:
        return

    try:
        response = requests.post(webhook_url, json={"text": message}, timeout=5)
        response.raise_for_status()
    except Exception as exc:
        logging.getLogger(__name__).error("Failed to send alert webhook: %s", exc)


def _section(settings: Dict[str, Any], name: str) -> Dict[str, Any]:
    return dict(settings.get(name) or {})


def _merged(defaults: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(defaults)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merged(merged[key], value)
        else:
            merged[key] = value
    return merged


def _dataclass_from(kind: type, values: Dict[str, Any], field_path: str, **fixed) -> Any:
    known = {item.name for item in fields(kind)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise UsageError(f"unknown keys {', '.join(unknown)}", field_path)
    params = {key: value for key, value in values.items() if value is not None}
    params.update(fixed)
    try:
        return kind(**params)
    except (TypeError, InputError) as exc:
        raise UsageError(str(exc), field_path) from exc


def _require(cfg: Dict[str, Any], key: str, field_path: str) -> Any:
    if key not in cfg or cfg[key] is None:
        raise UsageError("required field is missing", f"{field_path}.{key}" if field_path else key)
    return cfg[key]


def mala_settings(settings: Dict[str, Any], overrides: Optional[Dict[str, Any]], dim: int) -> MalaConfig:
    values = _merged(_section(_section(settings, "sampling"), "mala"), overrides or {})
    try:
        return MalaConfig.default_for(dim, **values)
    except (TypeError, InputError) as exc:
        raise UsageError(str(exc), "mala") from exc


@dataclass
class Problem:
    pre: ScoreModel
    cls: Optional[UncertaintyClass]
    mala: MalaConfig
    gibbs_iters: int
    seeds: Dict[str, int] = field(default_factory=dict)


class ModelResolver:
    """Model references in configs: an inline parameter document, a file path, "pre", "lfd" or "vertex:<i>"."""

    def __init__(self, problem: Problem, lfd_factory: Optional[Callable[[], ScoreModel]] = None):
        self.problem = problem
        self.lfd_factory = lfd_factory
        self._lfd: Optional[ScoreModel] = None

    def lfd(self) -> ScoreModel:
        if self._lfd is None:
            if self.lfd_factory is None:
                raise UsageError("'lfd' reference needs an uncertainty class (preset or basis)")
            self._lfd = self.lfd_factory()
        return self._lfd

    def resolve(self, ref: Any, field_path: str) -> ScoreModel:
        if not isinstance(ref, str):
            return load_model_ref(ref, field_path)
        if ref == "pre":
            return self.problem.pre
        if ref == "lfd":
            return self.lfd()
        if ref.startswith("vertex:"):
            if self.problem.cls is None:
                raise UsageError("vertex reference needs an uncertainty class", field_path)
            try:
                return self.problem.cls.basis[int(ref.split(":", 1)[1])]
            except (ValueError, IndexError) as exc:
                raise UsageError(f"bad vertex reference {ref!r}", field_path) from exc
        return load_model_ref(ref, field_path)


def load_model_ref(ref: Any, field_path: str) -> ScoreModel:
    if isinstance(ref, dict):
        return ModelCodec().decode(ref, field_path)
    if not isinstance(ref, str) or not ref:
        raise UsageError("model reference must be an object or a path", field_path)
    return load_model(ref)


def build_problem(cfg: Dict[str, Any], settings: Dict[str, Any], seed: int) -> Problem:
    gibbs_iters = int(cfg.get("gibbs_iters") or _section(settings, "sampling").get("rbm_gibbs_iters", 1000))
    seeds = {"seed": seed}
    if cfg.get("preset"):
        preset_seed = int(cfg.get("preset_seed", 0))
        seeds["preset_seed"] = preset_seed
        pre, cls = load_preset(cfg["preset"], seed=preset_seed)
    else:
        pre = load_model_ref(_require(cfg, "pre", ""), "pre")
        cls = None
        if cfg.get("basis"):
            basis = [load_model_ref(ref, f"basis[{index}]") for index, ref in enumerate(cfg["basis"])]
            try:
                cls = UncertaintyClass(basis, description=str(cfg.get("description", "")))
            except InputError as exc:
                raise UsageError(str(exc), "basis") from exc
    if cls is not None and cls.dim != pre.dim:
        raise UsageError(f"basis dimension {cls.dim} differs from pre-change dimension {pre.dim}", "basis")
    return Problem(pre, cls, mala_settings(settings, cfg.get("mala"), pre.dim), gibbs_iters, seeds)


def run_lfd_search(problem: Problem, lfd_cfg: Dict[str, Any], seed: int):
    if problem.cls is None:
        raise UsageError("LFD search needs a preset or a basis list", "basis")
    simplex = _dataclass_from(
        SimplexConfig,
        lfd_cfg.get("simplex") or {},
        "simplex",
        seed=seed,
        gibbs_iters=problem.gibbs_iters,
        mala=problem.mala,
    )
    train = _dataclass_from(TrainConfig, lfd_cfg.get("train") or {}, "train", seed=seed)
    return identify_lfd(
        lfd_cfg.get("mode", "basis_scan"),
        problem.cls,
        problem.pre,
        seed=seed,
        n_samples=int(lfd_cfg.get("n_samples", 10_000)),
        simplex=simplex,
        train=train,
        mala=problem.mala,
        gibbs_iters=problem.gibbs_iters,
    )


def _manifest_arguments(args: argparse.Namespace) -> Dict[str, Any]:
    return {
        key: str(value) if isinstance(value, float) and not math.isfinite(value) else value
        for key, value in vars(args).items()
    }


def _seed(args: argparse.Namespace, cfg: Dict[str, Any]) -> int:
    return int(args.seed) if args.seed is not None else int(cfg.get("seed", 0))


def _jobs(args: argparse.Namespace, settings: Dict[str, Any]) -> int:
    configured = args.jobs or _section(settings, "orchestration").get("jobs")
    return max(1, int(configured or os.cpu_count() or 1))


def cmd_lfd(args: argparse.Namespace, settings: Dict[str, Any], manifest: RunManifest) -> int:
    cfg = _merged(_section(settings, "lfd"), load_config(args.config))
    manifest.config = cfg
    seed = _seed(args, cfg)
    problem = build_problem(cfg, settings, seed)
    manifest.seeds = problem.seeds

    result = run_lfd_search(problem, cfg, seed)
    payload = result.to_dict()
    payload["description"] = problem.cls.description
    threshold = float(cfg.get("vertex_threshold", 0.99))
    payload["detection_model"] = ModelCodec().encode(detection_lfd(result, problem.cls, threshold))
    if result.flags:
        manifest.warnings.extend(result.flags)

    output = Path(cfg.get("output") or Path(_section(settings, "paths").get("results_dir", "results")) / "lfd.json")
    manifest.outputs["lfd"] = str(write_json(payload, str(output)))
    if cfg.get("model_output"):
        manifest.outputs["lfd_model"] = str(write_json(payload["detection_model"], str(cfg["model_output"])))
    logger.info("LFD (%s) selects element %s; flags=%s", result.mode, result.selected_index, result.flags)
    return EXIT_OK


def cmd_calibrate(args: argparse.Namespace, settings: Dict[str, Any], manifest: RunManifest) -> int:
    cfg = _merged(_section(settings, "detection"), load_config(args.config))
    manifest.config = cfg
    seed = _seed(args, cfg)
    problem = build_problem(cfg, settings, seed)
    manifest.seeds = problem.seeds
    resolver = ModelResolver(problem, lambda: _lfd_factory(problem, cfg, seed, settings))
    post = resolver.resolve(_require(cfg, "post", ""), "post")

    if cfg.get("samples_csv"):
        samples = read_stream_csv(cfg["samples_csv"])
    else:
        n = int(cfg.get("calibration_samples", 10_000))
        samples = sample_model(problem.pre, n, derive_seed(seed, CALIBRATION_SAMPLES), problem.mala, problem.gibbs_iters)

    calibration = calibrate_lambda(
        samples,
        problem.pre,
        post,
        tol=float(cfg.get("tol", 1e-8)),
        lambda_max=float(cfg.get("lambda_max", 64.0)),
        min_samples=int(cfg.get("min_samples", 100)),
    )
    payload: Dict[str, Any] = calibration.to_dict()
    if calibration.status != "root_found":
        manifest.warnings.append(calibration.status)

    heldout = int(cfg.get("validation_samples") or 0)
    if heldout > 0:
        fresh = sample_model(problem.pre, heldout, derive_seed(seed, HELDOUT_SAMPLES), problem.mala, problem.gibbs_iters)
        detector = DetectorConfig(cfg.get("kind", "rscusum"), problem.pre, post, lam=calibration.lambda_star)
        moment = exp_score_moment(detector, fresh)
        payload["heldout_exp_moment"] = {"mean": moment.mean, "std_error": moment.std_error, "n_samples": moment.n_samples}

    output = Path(cfg.get("output") or Path(_section(settings, "paths").get("results_dir", "results")) / "calibration.json")
    manifest.outputs["calibration"] = str(write_json(payload, str(output)))
    logger.info("Calibration status=%s lambda*=%.8g", calibration.status, calibration.lambda_star)
    return EXIT_OK


def _lfd_factory(problem: Problem, cfg: Dict[str, Any], seed: int, settings: Dict[str, Any]) -> ScoreModel:
    lfd_cfg = _merged(_section(settings, "lfd"), cfg.get("lfd") or {})
    result = run_lfd_search(problem, lfd_cfg, seed)
    return detection_lfd(result, problem.cls, float(lfd_cfg.get("vertex_threshold", 0.99)))


def cmd_detect(args: argparse.Namespace, settings: Dict[str, Any], manifest: RunManifest) -> int:
    pre = load_model(args.pre)
    post = load_model(args.post)
    cfg, _ = build_detector(args.kind, pre, post, lam=args.lam, tau=args.tau)
    outcome = detect_stream(cfg, read_stream_csv(args.stream))
    print(json.dumps(outcome.to_dict()))
    manifest.outputs["stdout"] = "detection"
    return EXIT_OK


def _parse_nu(value: str) -> float:
    if str(value).lower() in {"inf", "infinity", "none"}:
        return math.inf
    try:
        return int(value)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"nu must be an integer or 'inf', got {value!r}") from exc


def cmd_sample(args: argparse.Namespace, settings: Dict[str, Any], manifest: RunManifest) -> int:
    seed = int(args.seed or 0)
    cfg: Dict[str, Any] = {"preset": args.preset} if args.preset else {"pre": args.pre}
    if not args.preset and not args.pre:
        raise UsageError("give --preset or --pre", "pre")
    manifest.config = cfg
    problem = build_problem(cfg, settings, seed)
    manifest.seeds = problem.seeds
    post = ModelResolver(problem).resolve(args.post or "pre", "post")
    spec = StreamSpec(problem.pre, post, args.nu, args.length, seed)
    stream = generate_stream(spec, problem.mala, problem.gibbs_iters)
    manifest.outputs["stream"] = str(write_stream_csv(stream, Path(args.out)))
    return EXIT_OK


@dataclass
class BenchPlan:
    sweep: SweepConfig
    output_dir: Path
    calibrations: Dict[str, Dict[str, Any]]
    seeds: Dict[str, int]
    options: Dict[str, Any]


def build_bench(cfg: Dict[str, Any], settings: Dict[str, Any], seed: int, jobs: int) -> BenchPlan:
    problem = build_problem(cfg, settings, seed)
    resolver = ModelResolver(problem, lambda: _lfd_factory(problem, cfg, seed, settings))

    true_posts_cfg = cfg.get("true_posts")
    if true_posts_cfg is None:
        if problem.cls is None:
            raise UsageError("required when no preset or basis is given", "true_posts")
        true_posts = {f"vertex_{index}": model for index, model in enumerate(problem.cls.basis)}
    elif isinstance(true_posts_cfg, dict):
        true_posts = {str(name): resolver.resolve(ref, f"true_posts.{name}") for name, ref in true_posts_cfg.items()}
    else:
        true_posts = {f"post_{index}": resolver.resolve(ref, f"true_posts[{index}]") for index, ref in enumerate(true_posts_cfg)}

    detection_cfg = _section(settings, "detection")
    detectors: Dict[str, DetectorConfig] = {}
    calibrations: Dict[str, Dict[str, Any]] = {}
    for index, raw in enumerate(_require(cfg, "detectors", "")):
        field_path = f"detectors[{index}]"
        if not isinstance(raw, dict):
            raise UsageError("detector entry must be an object", field_path)
        kind = raw.get("kind", detection_cfg.get("kind", "rscusum"))
        name = str(raw.get("name", f"{kind}_{index}"))
        if name in detectors:
            raise UsageError(f"duplicate detector name {name!r}", f"{field_path}.name")
        post = resolver.resolve(raw.get("post", "lfd"), f"{field_path}.post")

        pre_samples = None
        if kind != "cusum" and raw.get("lambda") is None:
            n = int(raw.get("calibration_samples", detection_cfg.get("calibration_samples", 10_000)))
            pre_samples = sample_model(
                problem.pre, n, derive_seed(seed, CALIBRATION_SAMPLES, index), problem.mala, problem.gibbs_iters
            )
        calibration_options = {
            "tol": float(detection_cfg.get("tol", 1e-8)),
            "lambda_max": float(detection_cfg.get("lambda_max", 64.0)),
            "min_samples": int(detection_cfg.get("min_samples", 100)),
        }
        try:
            detector, calibration = build_detector(
                kind, problem.pre, post, lam=raw.get("lambda"), pre_samples=pre_samples, calibration=calibration_options
            )
        except InputError as exc:
            raise UsageError(str(exc), field_path) from exc
        detectors[name] = detector
        if calibration is not None:
            calibrations[name] = calibration.to_dict()

    try:
        sweep = SweepConfig(
            detectors=detectors,
            gammas=[float(gamma) for gamma in _require(cfg, "gammas", "")],
            nu=int(_require(cfg, "nu", "")),
            stream_length=int(_require(cfg, "stream_length", "")),
            trials=int(_require(cfg, "trials", "")),
            base_seed=seed,
            post_truths=true_posts,
            pre=problem.pre,
            threshold_mode=str(cfg.get("threshold_mode", "analytic")),
            calibration_trials=int(cfg.get("calibration_trials", 200)),
            calibration_max_len=cfg.get("calibration_max_len"),
            arl_trials=int(cfg.get("arl_trials", 0)),
            arl_max_len=cfg.get("arl_max_len"),
            jobs=jobs,
            mala=problem.mala,
            gibbs_iters=problem.gibbs_iters,
        )
    except InputError as exc:
        raise UsageError(str(exc), "bench") from exc

    output_dir = Path(cfg.get("output_dir") or Path(_section(settings, "paths").get("results_dir", "results")) / "bench")
    options = {
        key: cfg.get(key)
        for key in ("drift_samples", "trajectories", "trajectory_length", "write_dat")
    }
    return BenchPlan(sweep, output_dir, calibrations, problem.seeds, options)


def validate_sweep(result: SweepResult, settings: Dict[str, Any]) -> bool:
    validator = SweepQualityValidator(_section(settings, "quality"), result.nu)
    validator.validate_or_raise(result.to_frame())
    return True


def trajectory_table(plan: BenchPlan) -> pl.DataFrame:
    sweep = plan.sweep
    length = int(plan.options.get("trajectory_length") or 200)
    nu = min(sweep.nu, length)
    frames = []
    for post_index, (post_name, post) in enumerate(sweep.post_truths.items()):
        seed = derive_seed(sweep.base_seed, TRAJECTORY_STREAMS, post_index)
        stream = generate_stream(StreamSpec(sweep.pre, post, nu, length, seed), sweep.mala, sweep.gibbs_iters)
        for name, detector in sweep.detectors.items():
            frames.append(
                pl.DataFrame(
                    {
                        "detector": [name] * length,
                        "true_post": [post_name] * length,
                        "n": np.arange(1, length + 1),
                        "z": score_trajectory(detector, stream),
                    }
                )
            )
    return pl.concat(frames)


def persist_bench(plan: BenchPlan, result: SweepResult, settings: Dict[str, Any], run_id: str) -> Dict[str, str]:
    outputs = {
        name: str(path)
        for name, path in export_results(result, str(plan.output_dir), bool(plan.options.get("write_dat", True))).items()
    }
    if plan.calibrations:
        outputs["lambda_calibrations"] = str(write_json(plan.calibrations, str(plan.output_dir / "lambda_calibrations.json")))
    drift_samples = int(plan.options.get("drift_samples") or 0)
    if drift_samples > 0:
        outputs["drift"] = str(write_csv(drift_report(plan.sweep, drift_samples), plan.output_dir / "drift.csv"))
    if plan.options.get("trajectories"):
        outputs["trajectories"] = str(write_csv(trajectory_table(plan), plan.output_dir / "trajectories.csv"))

    paths = _section(settings, "paths")
    loader = ResultLoader(
        raw_path=paths.get("raw_dir", "results/raw"),
        duckdb_path=paths.get("duckdb_path", "results/warehouse/score_qcd.duckdb"),
        manifest_path=paths.get("manifest_path", "results/manifest.jsonl"),
    )
    artifact = {
        "run_id": run_id,
        "threshold_mode": result.threshold_mode,
        "thresholds": [
            {"detector": name, "gamma": gamma, "tau": tau} for (name, gamma), tau in result.thresholds.items()
        ],
        "lambda_calibrations": plan.calibrations,
        "failures": result.failures,
    }
    raw_path = loader.save_raw_artifact(artifact, "bench", run_id)
    if raw_path is not None:
        outputs["raw"] = str(raw_path)
    rows = result.to_frame().with_columns(
        pl.lit(result.nu).alias("nu"), pl.lit(result.stream_length).alias("stream_length")
    )
    if not loader.load_into_duckdb(rows, run_id):
        raise ScoreQcdError(f"DuckDB load failed for run {run_id}")
    return outputs


@task(name="build_bench", cache_policy=NO_CACHE)
def build_bench_task(cfg: Dict[str, Any], settings: Dict[str, Any], seed: int, jobs: int) -> BenchPlan:
    return build_bench(cfg, settings, seed, jobs)


@task(name="run_sweep", cache_policy=NO_CACHE)
def run_sweep_task(plan: BenchPlan) -> SweepResult:
    return edd_vs_arl_sweep(plan.sweep)


@task(name="validate_sweep", cache_policy=NO_CACHE)
def validate_sweep_task(result: SweepResult, settings: Dict[str, Any]) -> bool:
    return validate_sweep(result, settings)


@task(name="persist_bench", cache_policy=NO_CACHE)
def persist_bench_task(plan: BenchPlan, result: SweepResult, settings: Dict[str, Any], run_id: str) -> Dict[str, str]:
    return persist_bench(plan, result, settings, run_id)


@flow(name="score-qcd-bench", log_prints=False)
def run_bench_flow(cfg: Dict[str, Any], settings: Dict[str, Any], seed: int, jobs: int, run_id: str) -> Tuple[BenchPlan, Dict[str, str]]:
    flow_logger = get_run_logger()
    orchestration = _section(settings, "orchestration")
    retries = int(orchestration.get("task_retries", 0))
    retry_delay = int(orchestration.get("task_retry_delay_seconds", 5))

    try:
        flow_logger.info("Starting flow score-qcd-bench run_id=%s", run_id)
        plan = build_bench_task.with_options(retries=0)(cfg, settings, seed, jobs)
        result = run_sweep_task.with_options(retries=retries, retry_delay_seconds=retry_delay)(plan)
        validate_sweep_task.with_options(retries=0)(result, settings)
        outputs = persist_bench_task.with_options(retries=retries, retry_delay_seconds=retry_delay)(plan, result, settings, run_id)
        flow_logger.info("Bench finished successfully. outputs=%s", outputs)
        return plan, outputs
    except Exception as exc:
        flow_logger.error("Bench flow failed: %s", exc)
        send_alert(_section(settings, "alerts").get("webhook_url", ""), f"score-qcd-bench failed: {exc}")
        raise


def run_bench_local(cfg: Dict[str, Any], settings: Dict[str, Any], seed: int, jobs: int, run_id: str) -> Tuple[BenchPlan, Dict[str, str]]:
    try:
        logger.info("Starting local bench run_id=%s", run_id)
        plan = build_bench(cfg, settings, seed, jobs)
        result = edd_vs_arl_sweep(plan.sweep)
        validate_sweep(result, settings)
        outputs = persist_bench(plan, result, settings, run_id)
        logger.info("Local bench finished successfully. outputs=%s", outputs)
        return plan, outputs
    except Exception as exc:
        logger.error("Local bench failed: %s", exc, exc_info=True)
        send_alert(_section(settings, "alerts").get("webhook_url", ""), f"score-qcd-bench local failed: {exc}")
        raise


def cmd_bench(args: argparse.Namespace, settings: Dict[str, Any], manifest: RunManifest) -> int:
    cfg = _merged(_section(settings, "bench"), load_config(args.config))
    manifest.config = cfg
    seed = _seed(args, cfg)
    jobs = _jobs(args, settings)
    use_prefect = os.getenv("USE_PREFECT_FLOW", "0").lower() in {"1", "true", "yes"}
    runner = run_bench_flow if use_prefect else run_bench_local
    plan, outputs = runner(cfg, settings, seed, jobs, manifest.run_id)
    manifest.seeds = plan.seeds
    manifest.outputs.update(outputs)
    for name, calibration in plan.calibrations.items():
        if calibration["status"] != "root_found":
            manifest.warnings.append(f"{name}: {calibration['status']}")
    return EXIT_OK


COMMANDS: Dict[str, Callable[[argparse.Namespace, Dict[str, Any], RunManifest], int]] = {
    "lfd": cmd_lfd,
    "calibrate": cmd_calibrate,
    "detect": cmd_detect,
    "bench": cmd_bench,
    "sample": cmd_sample,
}


class CliParser(argparse.ArgumentParser):
    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    common = CliParser(add_help=False)
    common.add_argument("--settings", default=DEFAULT_SETTINGS, help=f"YAML defaults (default: {DEFAULT_SETTINGS}).")
    common.add_argument("--seed", type=int, default=None, help="Overrides every seed in the config.")
    common.add_argument("--jobs", type=int, default=None, help="Worker processes (default: available cores).")

    parser = CliParser(description="Robust score-based quickest change detection.")
    subparsers = parser.add_subparsers(dest="command", required=True)

    lfd_parser = subparsers.add_parser("lfd", parents=[common], help="Identify the least favorable distribution.")
    lfd_parser.add_argument("config", help="LFD config JSON (see docs/SCHEMAS.md).")

    calibrate_parser = subparsers.add_parser("calibrate", parents=[common], help="Calibrate the multiplier lambda.")
    calibrate_parser.add_argument("config", help="Calibration config JSON.")

    detect_parser = subparsers.add_parser("detect", parents=[common], help="Run a detector over a CSV stream.")
    detect_parser.add_argument("--stream", required=True, help="CSV with header t,x_1..x_d.")
    detect_parser.add_argument("--pre", required=True, help="Pre-change model JSON.")
    detect_parser.add_argument("--post", required=True, help="Post-change or LFD model JSON.")
    detect_parser.add_argument("--kind", default="rscusum", choices=["cusum", "scusum", "rscusum"])
    detect_parser.add_argument("--lambda", dest="lam", type=float, default=None, help="Score multiplier (> 0).")
    detect_parser.add_argument("--tau", type=float, required=True, help="Stopping threshold (>= 0).")

    bench_parser = subparsers.add_parser("bench", parents=[common], help="EDD versus ARL sweep.")
    bench_parser.add_argument("config", help="Bench config JSON.")

    sample_parser = subparsers.add_parser("sample", parents=[common], help="Synthesize a stream with a change point.")
    sample_parser.add_argument("--preset", default=None, help="mvn_m, mvn_c, exp or rbm.")
    sample_parser.add_argument("--pre", default=None, help="Pre-change model JSON (instead of --preset).")
    sample_parser.add_argument("--post", default=None, help="Post-change model: path, 'pre' or 'vertex:<i>'.")
    sample_parser.add_argument("--nu", type=_parse_nu, default=math.inf, help="Change point (integer or 'inf').")
    sample_parser.add_argument("--length", type=int, required=True, help="Stream length.")
    sample_parser.add_argument("--out", required=True, help="Output CSV path.")

    return parser.parse_args(argv)


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = parse_args(argv)
    try:
        settings = load_config(args.settings)
    except UsageError as exc:
        logging.getLogger(__name__).error("%s", exc)
        return EXIT_USAGE
    logging_cfg = _section(settings, "logging")
    setup_logging(
        log_level=logging_cfg.get("level", "INFO"),
        log_format=logging_cfg.get("format"),
        log_dir=_section(settings, "paths").get("log_dir", "logs"),
    )

    paths = _section(settings, "paths")
    manifest = RunManifest(
        subcommand=args.command,
        config_path=getattr(args, "config", None),
        seeds={},
        argv=argv,
        arguments=_manifest_arguments(args),
        settings=settings,
    )
    started = time.monotonic()
    exit_code = EXIT_RUNTIME
    try:
        exit_code = COMMANDS[args.command](args, settings, manifest)
        manifest.status = "succeeded"
    except (InputError, UsageError) as exc:
        logger.error("%s failed: %s", args.command, exc)
        manifest.status = "usage_error"
        exit_code = EXIT_USAGE
    except ScoreQcdError as exc:
        logger.error("%s failed: %s", args.command, exc)
        manifest.status = "runtime_error"
    except Exception as exc:
        logger.error("%s failed unexpectedly: %s", args.command, exc, exc_info=True)
        manifest.status = "runtime_error"
    finally:
        manifest.wall_clock_seconds = round(time.monotonic() - started, 3)
        ResultLoader(
            raw_path=paths.get("raw_dir", "results/raw"),
            duckdb_path=paths.get("duckdb_path", "results/warehouse/score_qcd.duckdb"),
            manifest_path=paths.get("manifest_path", "results/manifest.jsonl"),
        ).append_manifest(manifest)
    return exit_code


if __name__ == "__main__":
    raise SystemExit(main())
