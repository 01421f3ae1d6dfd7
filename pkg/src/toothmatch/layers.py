"""Point-wise linear maps and the activations used by the heads."""

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit

from .exceptions import ShapeError

sigmoid = expit


@dataclass(frozen=True, eq=False)
class Linear:
    """``y = W x + b`` applied column-wise to a ``(in_features, M)`` matrix."""

    weight: np.ndarray  # (out, in)
    bias: np.ndarray    # (out,)

    def __post_init__(self):
        w = np.asarray(self.weight, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        if w.ndim != 2 or b.shape != (w.shape[0],):
            raise ShapeError(f"linear map: weight {w.shape} and bias {b.shape} disagree")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @property
    def in_features(self):
        return self.weight.shape[1]

    @property
    def out_features(self):
        return self.weight.shape[0]

    def __call__(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[0] != self.in_features:
            raise ShapeError(f"linear map expects {self.in_features} input channels, got {x.shape[0]}")
        if x.ndim == 1:
            return self.weight @ x + self.bias
        return self.weight @ x + self.bias[:, None]

    @classmethod
    def zeros(cls, out_features, in_features):
        return cls(np.zeros((out_features, in_features)), np.zeros(out_features))

    @classmethod
    def identity(cls, n):
        return cls(np.eye(n), np.zeros(n))

    @classmethod
    def random(cls, rng, out_features, in_features, scale=0.1):
        # float32-representable values so a save/load round trip is lossless
        w = rng.uniform(-scale, scale, size=(out_features, in_features)).astype(np.float32)
        b = rng.uniform(-scale, scale, size=out_features).astype(np.float32)
        return cls(w.astype(np.float64), b.astype(np.float64))


def bce_with_logits(logits, targets):
    """Element-wise binary cross-entropy, numerically stable for large |logits|."""
    x = np.asarray(logits, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    return -(t * log_expit(x) + (1.0 - t) * log_expit(-x))
