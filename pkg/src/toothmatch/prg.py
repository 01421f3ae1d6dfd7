"""Point-wise residual gating: inject sampled 2D embeddings into 3D face features."""

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_matrix
from .encoder import OUTPUT_CHANNELS, FaceFeatureSet
from .exceptions import ShapeError
from .layers import Linear, sigmoid

GATE_HIDDEN = 64
DEFAULT_TAU = 1.0


@dataclass(frozen=True, eq=False)
class GatingParams:
    transform_2d: Linear   # C_e -> 128
    gate_layer1: Linear    # 128 + C_e + 1 -> hidden, rectified
    gate_layer2: Linear    # hidden -> 1, logistic
    tau: float = DEFAULT_TAU

    def __post_init__(self):
        c_e = self.transform_2d.in_features
        if self.transform_2d.out_features != OUTPUT_CHANNELS:
            raise ShapeError(f"transform_2d must map to {OUTPUT_CHANNELS} channels")
        if self.gate_layer1.in_features != OUTPUT_CHANNELS + c_e + 1:
            raise ShapeError(f"gate_layer1 must take {OUTPUT_CHANNELS + c_e + 1} inputs")
        if self.gate_layer2.in_features != self.gate_layer1.out_features or self.gate_layer2.out_features != 1:
            raise ShapeError("gate_layer2 must map the hidden width to one output")
        if not (np.isfinite(self.tau) and self.tau >= 0):
            raise ValueError("tau must be finite and >= 0")

    @property
    def embed_channels(self):
        return self.transform_2d.in_features

    def tensors(self):
        return {
            "prg.transform_2d.weight": self.transform_2d.weight, "prg.transform_2d.bias": self.transform_2d.bias,
            "prg.gate1.weight": self.gate_layer1.weight, "prg.gate1.bias": self.gate_layer1.bias,
            "prg.gate2.weight": self.gate_layer2.weight, "prg.gate2.bias": self.gate_layer2.bias,
        }

    @classmethod
    def from_tensors(cls, t, tau=DEFAULT_TAU):
        return cls(Linear(t["prg.transform_2d.weight"], t["prg.transform_2d.bias"]),
                   Linear(t["prg.gate1.weight"], t["prg.gate1.bias"]),
                   Linear(t["prg.gate2.weight"], t["prg.gate2.bias"]), tau=float(tau))

    @classmethod
    def seeded(cls, seed, embed_channels=256, hidden=GATE_HIDDEN, tau=DEFAULT_TAU, rng=None):
        rng = np.random.default_rng(seed) if rng is None else rng
        return cls(Linear.random(rng, OUTPUT_CHANNELS, embed_channels),
                   Linear.random(rng, hidden, OUTPUT_CHANNELS + embed_channels + 1),
                   Linear.random(rng, 1, hidden), tau=tau)


def gate(f3d, ep, mp, params):
    """Per-face gate value in (0, 1), shape ``(M,)``."""
    x = np.concatenate([f3d, ep, np.asarray(mp, dtype=np.float64)[None, :]], axis=0)
    hidden = np.maximum(params.gate_layer1(x), 0.0)
    return sigmoid(params.gate_layer2(hidden))[0]


def fuse(f3d, ep, mp, params, return_parts=False):
    """``F_fused = F_3d + tau * gate * transform_2d(e_p)``; the gate is one scalar per face.

    ``f3d`` is ``(128, M)`` (or a FaceFeatureSet), ``ep`` is ``(C_e, M)`` and
    ``mp`` the ``(M,)`` guidance weights.
    """
    f = f3d.values if isinstance(f3d, FaceFeatureSet) else np.asarray(f3d, dtype=np.float64)
    ep = np.asarray(ep, dtype=np.float64)
    mp = np.asarray(mp, dtype=np.float64)
    m = f.shape[1]
    if f.shape[0] != OUTPUT_CHANNELS:
        raise ShapeError(f"F_3d must have {OUTPUT_CHANNELS} channels, got {f.shape[0]}")
    if ep.shape != (params.embed_channels, m):
        raise ShapeError(f"e_p must be ({params.embed_channels}, {m}), got {ep.shape}")
    if mp.shape != (m,):
        raise ShapeError(f"guidance must have length {m}, got {mp.shape}")
    g = gate(f, ep, mp, params)
    e3d = params.transform_2d(ep)
    f2d = params.tau * g[None, :] * e3d
    fused = FaceFeatureSet("fused128", f + f2d)
    if return_parts:
        return fused, {"gate": g, "e3d": e3d, "f2d": f2d}
    return fused


class ResidualGatingFusion(TransformerMixin, BaseEstimator):
    """Estimator wrapper over :func:`fuse`.

    ``X`` holds the gate input row-wise, ``[F_3d | e_p | M_p]`` with shape
    ``(M, 128 + C_e + 1)``; ``transform`` returns the fused ``(M, 128)`` features.
    """

    def __init__(self, embed_channels=256, hidden=GATE_HIDDEN, tau=DEFAULT_TAU, seed=0, params=None):
        self.embed_channels = embed_channels
        self.hidden = hidden
        self.tau = tau
        self.seed = seed
        self.params = params

    def fit(self, X, y=None):
        width = OUTPUT_CHANNELS + self.embed_channels + 1
        check_matrix(X, "X", shape=(None, width))
        if self.params is not None:
            self.params_ = GatingParams(self.params.transform_2d, self.params.gate_layer1,
                                        self.params.gate_layer2, tau=self.tau)
        else:
            self.params_ = GatingParams.seeded(self.seed, self.embed_channels, self.hidden, self.tau)
        self.n_features_in_ = width
        return self

    def transform(self, X):
        check_is_fitted(self, "params_")
        X = check_matrix(X, "X", shape=(None, self.n_features_in_))
        f3d = X[:, :OUTPUT_CHANNELS].T
        ep = X[:, OUTPUT_CHANNELS:-1].T
        mp = X[:, -1]
        return fuse(f3d, ep, mp, self.params_).values.T
