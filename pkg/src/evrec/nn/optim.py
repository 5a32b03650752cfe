"""Adam optimizer over keyed parameter maps."""

from __future__ import annotations

import numpy as np


class NonFiniteGradient(FloatingPointError):
    """Raised when a gradient contains NaN or Inf; names the parameter."""


class Adam:
    """Standard Adam (beta1=0.9, beta2=0.999, eps=1e-8, bias correction).

    Updates parameters in place; moment buffers are keyed like the
    parameter map and created lazily on the first step.
    """

    def __init__(self, lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, weights: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        for key, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradient(f"non-finite gradient in {key!r}")
            if key not in weights:
                raise KeyError(f"gradient for unknown parameter {key!r}")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for key, g in grads.items():
            if key not in self.m:
                self.m[key] = np.zeros_like(weights[key])
                self.v[key] = np.zeros_like(weights[key])
            m, v = self.m[key], self.v[key]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            weights[key] -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Moment buffers keyed for checkpointing."""
        out = {}
        for key, arr in self.m.items():
            out[f"m/{key}"] = arr
        for key, arr in self.v.items():
            out[f"v/{key}"] = arr
        return out

    @staticmethod
    def from_state(step_count: int, arrays: dict[str, np.ndarray],
                   lr: float = 1e-4) -> "Adam":
        opt = Adam(lr=lr)
        opt.step_count = step_count
        for key, arr in arrays.items():
            kind, _, name = key.partition("/")
            if kind == "m":
                opt.m[name] = arr.copy()
            elif kind == "v":
                opt.v[name] = arr.copy()
        return opt
