"""Softmax-output feedforward network for beta(x) and the Adam optimizer that trains it."""

from typing import Any, Dict, List, Sequence, Tuple

import numpy as np
from scipy.special import softmax

from src.errors import InputError


DEFAULT_HIDDEN = (128, 64)


class BetaNetwork:
    """Layers d -> hidden... -> m with ReLU on hidden layers and softmax on the output."""

    def __init__(self, d: int, m: int, hidden: Sequence[int] = DEFAULT_HIDDEN, seed: int = 0):
        if d < 1 or m < 1:
            raise InputError(f"BetaNetwork needs d >= 1 and m >= 1, got d={d} m={m}")
        self.d = int(d)
        self.m = int(m)
        self.hidden = tuple(int(width) for width in hidden)
        rng = np.random.default_rng(seed)
        widths = [self.d, *self.hidden, self.m]
        self.params: Dict[str, np.ndarray] = {}
        for layer, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:]), start=1):
            self.params[f"W{layer}"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
            self.params[f"b{layer}"] = np.zeros(fan_out)

    @property
    def n_layers(self) -> int:
        return len(self.hidden) + 1

    @property
    def widths(self) -> List[int]:
        return [self.d, *self.hidden, self.m]

    def forward(self, X: np.ndarray) -> Tuple[np.ndarray, List[np.ndarray]]:
        activations = [X]
        h = X
        for layer in range(1, self.n_layers + 1):
            z = h @ self.params[f"W{layer}"] + self.params[f"b{layer}"]
            h = np.maximum(z, 0.0) if layer < self.n_layers else z
            activations.append(h)
        return h, activations

    def __call__(self, X: np.ndarray) -> np.ndarray:
        logits, _ = self.forward(np.atleast_2d(X))
        return softmax(logits, axis=1)

    def backward(self, activations: List[np.ndarray], grad_logits: np.ndarray) -> Dict[str, np.ndarray]:
        grads: Dict[str, np.ndarray] = {}
        upstream = grad_logits
        for layer in range(self.n_layers, 0, -1):
            inputs = activations[layer - 1]
            grads[f"W{layer}"] = inputs.T @ upstream
            grads[f"b{layer}"] = upstream.sum(axis=0)
            if layer > 1:
                upstream = (upstream @ self.params[f"W{layer}"].T) * (inputs > 0.0)
        return grads

    def to_dict(self) -> Dict[str, Any]:
        return {
            "d": self.d,
            "m": self.m,
            "hidden": list(self.hidden),
            "params": {name: value.tolist() for name, value in self.params.items()},
        }

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> "BetaNetwork":
        net = cls(d=raw["d"], m=raw["m"], hidden=raw["hidden"])
        for name, value in raw["params"].items():
            array = np.asarray(value, dtype=np.float64)
            if name not in net.params or array.shape != net.params[name].shape:
                raise InputError(f"BetaNetwork parameter {name} has unexpected shape {array.shape}")
            net.params[name] = array
        return net


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        step_size = self.lr / bc1

        for key in params:
            g = grads[key]
            if key not in self.m:
                self.m[key] = np.zeros_like(params[key])
                self.v[key] = np.zeros_like(params[key])

            self.m[key] *= self.beta1
            self.m[key] += (1.0 - self.beta1) * g
            self.v[key] *= self.beta2
            self.v[key] += (1.0 - self.beta2) * (g * g)

            denom = np.sqrt(self.v[key] / bc2) + self.epsilon
            params[key] -= step_size * self.m[key] / denom
