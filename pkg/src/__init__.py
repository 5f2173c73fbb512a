"""Robust score-based quickest change detection."""

from src.detection import DetectorConfig, DetectorState, LambdaCalibration, calibrate_lambda, run_detector, step
from src.harness import SweepConfig, SweepResult, edd_vs_arl_sweep, estimate_arl, estimate_edd, export_results
from src.lfd import LfdResult, UncertaintyClass, identify_lfd
from src.load import ResultLoader, RunManifest
from src.quality import SweepQualityValidator
from src.score_models import (
    GaussBernoulliRbm,
    GaussianModel,
    MixtureModel,
    QuarticExpModel,
    ScoreModel,
    WeightedScoreField,
)

__all__ = [
    "ScoreModel",
    "GaussianModel",
    "QuarticExpModel",
    "GaussBernoulliRbm",
    "MixtureModel",
    "WeightedScoreField",
    "UncertaintyClass",
    "LfdResult",
    "identify_lfd",
    "DetectorConfig",
    "DetectorState",
    "LambdaCalibration",
    "step",
    "run_detector",
    "calibrate_lambda",
    "SweepConfig",
    "SweepResult",
    "estimate_arl",
    "estimate_edd",
    "edd_vs_arl_sweep",
    "export_results",
    "SweepQualityValidator",
    "ResultLoader",
    "RunManifest",
]
