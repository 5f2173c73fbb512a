import json
import logging
from pathlib import Path
from typing import Any, Dict

import numpy as np

from src.errors import InputError, UsageError
from src.score_models import (
    GaussBernoulliRbm,
    GaussianModel,
    MixtureModel,
    QuarticExpModel,
    ScoreModel,
)

logger = logging.getLogger(__name__)


class ModelCodec:
    """Turns model parameter documents (the "kind" discriminated JSON schema) into models and back."""

    REQUIRED_FIELDS = {
        "gaussian": ("mu", "cov"),
        "quartic_exp": ("tau", "mu", "d"),
        "rbm": ("W", "b", "c"),
        "mixture": ("basis", "weights"),
    }

    def decode(self, raw: Dict[str, Any], field_path: str = "model") -> ScoreModel:
        if not isinstance(raw, dict):
            raise UsageError("model document must be an object", field_path)

        kind = raw.get("kind")
        if kind not in self.REQUIRED_FIELDS:
            raise UsageError(f"unknown model kind {kind!r}", f"{field_path}.kind")

        missing = [name for name in self.REQUIRED_FIELDS[kind] if name not in raw]
        if missing:
            raise UsageError(f"missing fields {', '.join(missing)}", field_path)

        try:
            if kind == "gaussian":
                return GaussianModel(mu=raw["mu"], cov=raw["cov"])
            if kind == "quartic_exp":
                return QuarticExpModel(tau=float(raw["tau"]), mu=float(raw["mu"]), d=int(raw["d"]))
            if kind == "rbm":
                return GaussBernoulliRbm(W=raw["W"], b=raw["b"], c=raw["c"])
            basis = [
                self.decode(item, f"{field_path}.basis[{index}]") for index, item in enumerate(raw["basis"])
            ]
            return MixtureModel(basis, raw["weights"])
        except InputError as exc:
            raise UsageError(str(exc), field_path) from exc
        except (TypeError, ValueError) as exc:
            raise UsageError(f"malformed parameters: {exc}", field_path) from exc

    def encode(self, model: ScoreModel) -> Dict[str, Any]:
        if isinstance(model, GaussianModel):
            return {"kind": "gaussian", "mu": model.mu.tolist(), "cov": model.cov.tolist()}
        if isinstance(model, QuarticExpModel):
            return {"kind": "quartic_exp", "tau": model.tau, "mu": model.mu, "d": model.d}
        if isinstance(model, GaussBernoulliRbm):
            return {"kind": "rbm", "W": model.W.tolist(), "b": model.b.tolist(), "c": model.c.tolist()}
        if isinstance(model, MixtureModel):
            return {
                "kind": "mixture",
                "basis": [self.encode(item) for item in model.basis],
                "weights": model.weights.tolist(),
            }
        raise InputError(f"Model of kind {model.kind!r} has no parameter document")


def read_json(path: str) -> Dict[str, Any]:
    try:
        with open(path, "r", encoding="utf-8") as handle:
            return json.load(handle)
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"invalid JSON in {path}: {exc}") from exc


def write_json(payload: Dict[str, Any], path: str) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    with open(target, "w", encoding="utf-8") as handle:
        json.dump(payload, handle, indent=2, ensure_ascii=False, default=_json_default)
    return target


def _json_default(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def load_model(path: str) -> ScoreModel:
    model = ModelCodec().decode(read_json(path), field_path=str(path))
    logger.info("Loaded %s model (d=%s) from %s", model.kind, model.dim, path)
    return model


def save_model(model: ScoreModel, path: str) -> Path:
    return write_json(ModelCodec().encode(model), path)
