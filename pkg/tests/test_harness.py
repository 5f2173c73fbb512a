import json
import math

import numpy as np
import polars as pl
import pytest

from src.detection import DetectorConfig, calibrate_lambda, empirical_drift, threshold_for_arl
from src.errors import EstimationError, InputError
from src.harness import (
    RecordLadder,
    SweepConfig,
    SweepResult,
    SweepRow,
    calibrate_threshold,
    drift_report,
    edd_linearity,
    edd_vs_arl_sweep,
    estimate_arl,
    estimate_edd,
    export_results,
    score_trajectory,
    summarize,
    summarize_delays,
    trajectory_slope,
)
from src.load import read_sweep_csv
from src.presets import mvn_m, mvn_mean_shift, mvn_pre
from src.samplers import StreamSpec, generate_stream, sample_gaussian
from src.score_models import GaussianModel

LAMBDA_STAR = 1.5
GAMMAS = [100, 200, 400, 800, 1500, 3000]


def _rscusum(post=None, lam=LAMBDA_STAR, tau=None):
    pre, cls = mvn_m()
    return DetectorConfig("rscusum", pre, cls.basis[0] if post is None else post, lam=lam, tau=tau)


def _small_sweep(jobs=1, **overrides):
    pre, cls = mvn_m()
    params = {
        "detectors": {"rscusum": _rscusum(), "rcusum": DetectorConfig("cusum", pre, cls.basis[0])},
        "gammas": [10.0, 50.0],
        "nu": 20,
        "stream_length": 300,
        "trials": 6,
        "base_seed": 42,
        "post_truths": {"vertex_0": cls.basis[0], "vertex_3": cls.basis[3]},
        "pre": pre,
        "jobs": jobs,
    }
    params.update(overrides)
    return SweepConfig(**params)


def _edd(summary, detector, true_post, gamma):
    cell = summary.filter(
        (pl.col("detector") == detector) & (pl.col("true_post") == true_post) & (pl.col("gamma") == gamma)
    )
    return cell["edd_mean"][0]


def test_arl_with_zero_threshold_is_exactly_one():
    estimate = estimate_arl(_rscusum(tau=0.0), mvn_pre(), trials=20, max_len=50, base_seed=0)

    assert estimate.mean == 1.0
    assert estimate.std_error == 0.0
    assert estimate.censored_count == 0


def test_arl_when_detector_cannot_tell_models_apart():
    pre = mvn_pre()
    cfg = DetectorConfig("rscusum", pre, pre, lam=1.0, tau=0.5)

    estimate = estimate_arl(cfg, pre, trials=10, max_len=200, base_seed=1)

    assert estimate.censored_count == 10
    assert estimate.mean == 200.0


@pytest.mark.slow
def test_analytic_threshold_keeps_arl_above_target():
    pre, cls = mvn_m()
    calibration = calibrate_lambda(sample_gaussian(pre, 10_000, seed=2), pre, cls.basis[0])
    cfg = _rscusum(lam=calibration.lambda_star, tau=threshold_for_arl(100))

    estimate = estimate_arl(cfg, pre, trials=500, max_len=10_000, base_seed=3, jobs=2)

    assert estimate.mean >= 100


def test_edd_with_change_at_start_and_zero_threshold_is_one():
    pre, cls = mvn_m()

    estimate = estimate_edd(_rscusum(tau=0.0), pre, cls.basis[0], nu=1, trials=10, stream_length=20, base_seed=4)

    assert estimate.edd_mean == 1.0
    assert estimate.false_alarm_count == 0


def test_edd_when_every_trial_false_alarms():
    pre, cls = mvn_m()

    with pytest.raises(EstimationError):
        estimate_edd(_rscusum(tau=0.0), pre, cls.basis[0], nu=5, trials=4, stream_length=20, base_seed=5)


def test_summarize_delays_counts_censored_and_false_alarms():
    rows = [
        SweepRow.from_stop("d", "p", 10.0, 1.0, 0, None, nu=5),
        SweepRow.from_stop("d", "p", 10.0, 1.0, 1, 3, nu=5),
        SweepRow.from_stop("d", "p", 10.0, 1.0, 2, 9, nu=5),
    ]

    estimate = summarize_delays(rows, nu=5, stream_length=20)

    assert rows[1].false_alarm and rows[0].censored
    assert rows[2].delay == 5
    assert estimate.edd_mean == pytest.approx((16 + 5) / 2)
    assert estimate.false_alarm_count == 1
    assert estimate.censored_count == 1


def test_record_ladder_matches_first_crossing():
    ladder = RecordLadder.from_path(np.array([0.0, 1.0, 0.5, 2.0, 2.0, 3.0]))

    assert ladder.times.tolist() == [1, 2, 4, 6]
    assert ladder.stopping_time(0.0) == 1
    assert ladder.stopping_time(1.5) == 4
    assert ladder.stopping_time(3.0) == 6
    assert ladder.stopping_time(3.5) is None
    assert ladder.run_length(3.5) == 6


def test_calibrate_threshold_bisects_to_target():
    ladders = [RecordLadder.from_path(np.arange(1.0, 101.0)) for _ in range(3)]

    assert calibrate_threshold(ladders, 1.0) == 0.0
    assert calibrate_threshold(ladders, 40.0) == pytest.approx(39.0, rel=1e-8)
    with pytest.raises(EstimationError):
        calibrate_threshold(ladders, 500.0)


def test_sweep_config_validation():
    with pytest.raises(InputError):
        _small_sweep(trials=0)
    with pytest.raises(InputError):
        _small_sweep(gammas=[0.5])
    with pytest.raises(InputError):
        _small_sweep(nu=400)
    with pytest.raises(InputError):
        _small_sweep(threshold_mode="empirical")


def test_single_trial_sweep_is_reproducible():
    detectors = {"rscusum": _rscusum()}

    first = edd_vs_arl_sweep(_small_sweep(detectors=detectors, gammas=[20.0], trials=1, post_truths={"p": mvn_mean_shift(0.5)}))
    second = edd_vs_arl_sweep(_small_sweep(detectors=detectors, gammas=[20.0], trials=1, post_truths={"p": mvn_mean_shift(0.5)}))

    assert len(first.rows) == 1
    assert first.rows == second.rows
    assert first.thresholds[("rscusum", 20.0)] == pytest.approx(math.log(20.0))


def test_sweep_output_is_independent_of_worker_count():
    serial = edd_vs_arl_sweep(_small_sweep(jobs=1))
    parallel = edd_vs_arl_sweep(_small_sweep(jobs=2))

    assert serial.to_frame().equals(parallel.to_frame())
    assert serial.to_frame().height == 2 * 2 * 2 * 6
    assert serial.failures == []


def test_calibrated_sweep_reports_arl_per_cell():
    result = edd_vs_arl_sweep(_small_sweep(threshold_mode="calibrated", calibration_trials=30, calibration_max_len=500))
    summary = summarize(result)

    assert set(result.arl) == {(name, gamma) for name in ("rscusum", "rcusum") for gamma in (10.0, 50.0)}
    for (name, gamma), estimate in result.arl.items():
        assert estimate.mean >= gamma
        assert result.thresholds[(name, gamma)] >= 0.0
    assert summary["arl_mean"].null_count() == 0


def test_sweep_rows_follow_delay_convention():
    result = edd_vs_arl_sweep(_small_sweep())

    for row in result.rows:
        if row.censored:
            assert row.stopping_time is None and row.delay is None
        else:
            assert row.stopping_time >= 1
            assert (row.delay is None) == (row.stopping_time < result.nu)
            if row.delay is not None:
                assert row.delay == row.stopping_time - result.nu + 1


def test_export_empty_result_writes_header_only(tmp_path):
    result = SweepResult(rows=[], nu=5, stream_length=10, detectors=[], posts=[], gammas=[], thresholds={})

    outputs = export_results(result, str(tmp_path), write_dat=False)

    assert outputs["csv"].read_text(encoding="utf-8").splitlines() == [
        "detector,true_post,gamma,tau,trial,stopping_time,delay,censored"
    ]


def test_export_single_row_round_trips(tmp_path):
    row = SweepRow.from_stop("rscusum", "vertex_0", 100.0, math.log(100.0), 0, 61, nu=50)
    result = SweepResult(
        rows=[row],
        nu=50,
        stream_length=10_000,
        detectors=["rscusum"],
        posts=["vertex_0"],
        gammas=[100.0],
        thresholds={("rscusum", 100.0): math.log(100.0)},
    )

    outputs = export_results(result, str(tmp_path))

    assert len(outputs["csv"].read_text(encoding="utf-8").splitlines()) == 2
    assert read_sweep_csv(outputs["csv"]).equals(result.to_frame())
    assert outputs["dat"].exists()


def test_export_summary_has_one_cell_per_detector_gamma_post(tmp_path):
    result = edd_vs_arl_sweep(_small_sweep())

    outputs = export_results(result, str(tmp_path))
    payload = json.loads(outputs["summary"].read_text(encoding="utf-8"))

    assert len(payload["cells"]) == 2 * 2 * 2
    assert payload["run"]["nu"] == 20


def test_edd_linearity_on_exact_line():
    summary = pl.DataFrame(
        {
            "detector": ["d"] * 3,
            "true_post": ["p"] * 3,
            "gamma": [100.0, 1000.0, 10_000.0],
            "edd_mean": [2.0 + 3.0 * math.log(g) for g in (100.0, 1000.0, 10_000.0)],
        }
    )

    fits = edd_linearity(summary)

    assert fits.height == 1
    assert fits["slope"][0] == pytest.approx(3.0)
    assert fits["intercept"][0] == pytest.approx(2.0)
    assert fits["r_squared"][0] == pytest.approx(1.0)


def test_trajectories_rise_after_change_and_hug_zero_before():
    pre, cls = mvn_m()
    cfg = _rscusum()

    post_path = score_trajectory(cfg, generate_stream(StreamSpec(pre, cls.basis[0], 1, 500, seed=6)))
    pre_path = score_trajectory(cfg, generate_stream(StreamSpec(pre, cls.basis[0], math.inf, 500, seed=7)))
    slope, stderr = trajectory_slope(post_path)

    assert slope - 3.0 * stderr > 0
    assert np.all(pre_path >= 0.0)
    assert pre_path.mean() < 2.0
    assert pre_path.mean() < post_path.mean()


def test_drift_report_signs():
    report = drift_report(_small_sweep(), n_samples=20_000)

    rscusum = report.filter(pl.col("detector") == "rscusum")
    assert rscusum.filter(pl.col("law") == "pre")["drift_mean"][0] < 0
    assert (rscusum.filter(pl.col("law") != "pre")["drift_mean"] > 0).all()


def _table_cell(shift, gamma, trials=200):
    pre = mvn_pre()
    post = mvn_mean_shift(shift)
    calibration = calibrate_lambda(sample_gaussian(pre, 10_000, seed=8), pre, post)
    sweep = SweepConfig(
        detectors={
            "rscusum": DetectorConfig("rscusum", pre, post, lam=calibration.lambda_star),
            "rcusum": DetectorConfig("cusum", pre, post),
        },
        gammas=[float(gamma)],
        nu=50,
        stream_length=10_000,
        trials=trials,
        base_seed=9,
        post_truths={"post": post},
        pre=pre,
        threshold_mode="calibrated",
        calibration_trials=200,
        jobs=2,
    )
    return summarize(edd_vs_arl_sweep(sweep))


@pytest.mark.slow
@pytest.mark.parametrize(
    "shift,gamma,rscusum_edd,rcusum_edd",
    [(0.5, 100, 11.2552, 11.4017), (2.0, 3000, 3.6752, 3.6684)],
)
def test_reproduces_reference_delays(shift, gamma, rscusum_edd, rcusum_edd):
    summary = _table_cell(shift, gamma)

    assert _edd(summary, "rscusum", "post", float(gamma)) == pytest.approx(rscusum_edd, rel=0.3)
    assert _edd(summary, "rcusum", "post", float(gamma)) == pytest.approx(rcusum_edd, rel=0.3)


@pytest.mark.slow
def test_robust_delay_grows_linearly_in_log_arl():
    pre, cls = mvn_m()
    sweep = SweepConfig(
        detectors={"rscusum": _rscusum()},
        gammas=[float(gamma) for gamma in GAMMAS],
        nu=50,
        stream_length=10_000,
        trials=200,
        base_seed=10,
        post_truths={f"vertex_{index}": model for index, model in enumerate(cls.basis)},
        pre=pre,
        jobs=2,
    )

    fits = edd_linearity(summarize(edd_vs_arl_sweep(sweep)))

    assert fits.height == 4
    assert (fits["r_squared"] >= 0.95).all()
    assert (fits["slope"] > 0).all()


@pytest.mark.slow
def test_misconfigured_detector_has_negative_drift_and_superlinear_delay():
    pre, cls = mvn_m()
    wrong = GaussianModel([1.2, 1.2], pre.cov)
    detectors = {"rscusum": _rscusum(), "scusum_wrong": DetectorConfig("scusum", pre, wrong, lam=LAMBDA_STAR)}
    sweep = SweepConfig(
        detectors=detectors,
        gammas=[100.0, 3000.0],
        nu=50,
        stream_length=5000,
        trials=200,
        base_seed=11,
        post_truths={"vertex_0": cls.basis[0]},
        pre=pre,
        jobs=2,
    )

    drift = empirical_drift(detectors["scusum_wrong"], sample_gaussian(cls.basis[0], 100_000, seed=12))
    summary = summarize(edd_vs_arl_sweep(sweep))
    log_ratio = math.log(3000.0) / math.log(100.0)
    wrong_ratio = _edd(summary, "scusum_wrong", "vertex_0", 3000.0) / _edd(summary, "scusum_wrong", "vertex_0", 100.0)
    robust_ratio = _edd(summary, "rscusum", "vertex_0", 3000.0) / _edd(summary, "rscusum", "vertex_0", 100.0)

    assert drift.mean + 3.0 * drift.std_error < 0
    assert wrong_ratio > log_ratio
    assert robust_ratio < wrong_ratio
