"""Parameter recipes for the pre-change law and the four-element uncertainty classes used in experiments."""

from typing import Callable, Dict, Tuple

import numpy as np

from src.errors import UsageError
from src.lfd import UncertaintyClass
from src.score_models import GaussBernoulliRbm, GaussianModel, QuarticExpModel, ScoreModel

V_STAR = np.array([[1.0, 0.5], [0.5, 1.0]])
MU_STAR = np.zeros(2)

MVN_MEAN_SHIFTS = (0.5, 0.6, 0.8, 1.0)
MVN_LOG_COV_SHIFTS = (0.1, 0.2, 0.8, 1.0)
EXP_SCALE_SHIFTS = (1.0, 2.0, 8.0, 10.0)
EXP_LOCATION_SHIFTS = (0.01, 0.02, 0.08, 0.1)
RBM_WEIGHT_SHIFTS = (0.001, 0.002, 0.008, 0.01)


def mvn_pre() -> GaussianModel:
    return GaussianModel(MU_STAR, V_STAR)


def mvn_mean_shift(eps: float) -> GaussianModel:
    return GaussianModel(MU_STAR + eps, V_STAR)


def mvn_m(seed: int = 0) -> Tuple[ScoreModel, UncertaintyClass]:
    basis = [mvn_mean_shift(eps) for eps in MVN_MEAN_SHIFTS]
    return mvn_pre(), UncertaintyClass(basis, description=f"MVN_m mean shifts {MVN_MEAN_SHIFTS}")


def mvn_c(seed: int = 0) -> Tuple[ScoreModel, UncertaintyClass]:
    basis = [
        GaussianModel(MU_STAR + eps, V_STAR * np.exp(delta))
        for eps, delta in zip(MVN_MEAN_SHIFTS, MVN_LOG_COV_SHIFTS)
    ]
    return mvn_pre(), UncertaintyClass(basis, description=f"MVN_c log-covariance shifts {MVN_LOG_COV_SHIFTS}")


def quartic_exp(seed: int = 0, d: int = 2) -> Tuple[ScoreModel, UncertaintyClass]:
    pre = QuarticExpModel(tau=1.0, mu=0.0, d=d)
    basis = [
        QuarticExpModel(tau=1.0 + eps, mu=delta, d=d) for eps, delta in zip(EXP_SCALE_SHIFTS, EXP_LOCATION_SHIFTS)
    ]
    return pre, UncertaintyClass(basis, description="EXP scale/location shifts")


def rbm(seed: int = 0, d_x: int = 2, d_h: int = 2) -> Tuple[ScoreModel, UncertaintyClass]:
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((d_x, d_h))
    b = rng.standard_normal(d_x)
    c = rng.standard_normal(d_h)
    pre = GaussBernoulliRbm(W, b, c)
    basis = [GaussBernoulliRbm(W + eps, b, c) for eps in RBM_WEIGHT_SHIFTS]
    return pre, UncertaintyClass(basis, description=f"RBM weight shifts {RBM_WEIGHT_SHIFTS} (seed={seed})")


PRESETS: Dict[str, Callable[..., Tuple[ScoreModel, UncertaintyClass]]] = {
    "mvn_m": mvn_m,
    "mvn_c": mvn_c,
    "exp": quartic_exp,
    "rbm": rbm,
}


def load_preset(name: str, seed: int = 0) -> Tuple[ScoreModel, UncertaintyClass]:
    if name not in PRESETS:
        raise UsageError(f"unknown preset {name!r}; choose one of {sorted(PRESETS)}", "preset")
    return PRESETS[name](seed=seed)
