"""Center-guided mask refinement.

Instance queries come from sigmoid attention pooling over face features; a
bottleneck maps K slots to N queries whose heads emit mask kernels, class
logits and objectness. Each instance's 3D center is the active face nearest to
the centroid of its thresholded mask, and its 2D center is that face's pixel.
"""

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_matrix
from .encoder import OUTPUT_CHANNELS, FaceFeatureSet
from .exceptions import ShapeError
from .layers import Linear, bce_with_logits, sigmoid
from .mesh import N_CLASSES

N_SLOTS = 120
N_QUERIES = 30
KERNEL_DIM = 32
MASK_THRESHOLD = 0.5
UNIFORM_EPS = 1e-12


@dataclass(frozen=True, eq=False)
class InstancePrediction:
    mask_logits: np.ndarray   # (N, M)
    class_logits: np.ndarray  # (N, 17)
    objectness: np.ndarray    # (N,)
    centers3d: np.ndarray     # (N, 3), NaN where invalid
    centers2d: np.ndarray     # (N, 2), NaN where invalid
    valid: np.ndarray         # (N,) bool

    def __post_init__(self):
        ml = np.asarray(self.mask_logits, dtype=np.float64)
        n = ml.shape[0]
        arrays = {
            "mask_logits": ml,
            "class_logits": np.asarray(self.class_logits, dtype=np.float64),
            "objectness": np.asarray(self.objectness, dtype=np.float64).reshape(-1),
            "centers3d": np.asarray(self.centers3d, dtype=np.float64).reshape(n, 3),
            "centers2d": np.asarray(self.centers2d, dtype=np.float64).reshape(n, 2),
            "valid": np.asarray(self.valid, dtype=bool).reshape(-1),
        }
        if ml.ndim != 2:
            raise ShapeError("mask_logits must be (N, M)")
        if arrays["class_logits"].shape != (n, N_CLASSES):
            raise ShapeError(f"class_logits must be ({n}, {N_CLASSES})")
        for key in ("objectness", "valid"):
            if arrays[key].shape != (n,):
                raise ShapeError(f"{key} must have length {n}")
        for key, arr in arrays.items():
            object.__setattr__(self, key, arr)

    @property
    def n_instances(self):
        return self.mask_logits.shape[0]

    @property
    def n_faces(self):
        return self.mask_logits.shape[1]

    def replace(self, **changes):
        fields = {k: getattr(self, k) for k in
                  ("mask_logits", "class_logits", "objectness", "centers3d", "centers2d", "valid")}
        fields.update(changes)
        return InstancePrediction(**fields)


@dataclass(frozen=True, eq=False)
class DecoderWeights:
    attn_proj: Linear    # 128 -> K
    bottleneck: Linear   # K slots -> N queries (weight N x K)
    kernel_head: Linear  # 128 -> D
    class_head: Linear   # 128 -> 17
    obj_head: Linear     # 128 -> 1
    mask_proj: Linear    # 128 -> D

    def __post_init__(self):
        k = self.attn_proj.out_features
        d = self.kernel_head.out_features
        checks = [
            (self.attn_proj.in_features == OUTPUT_CHANNELS, "attn_proj must take 128 channels"),
            (self.bottleneck.in_features == k, "bottleneck input must equal the slot count"),
            (self.kernel_head.in_features == OUTPUT_CHANNELS, "kernel_head must take 128 channels"),
            (self.class_head.in_features == OUTPUT_CHANNELS and self.class_head.out_features == N_CLASSES,
             "class_head must map 128 -> 17"),
            (self.obj_head.in_features == OUTPUT_CHANNELS and self.obj_head.out_features == 1,
             "obj_head must map 128 -> 1"),
            (self.mask_proj.in_features == OUTPUT_CHANNELS and self.mask_proj.out_features == d,
             "mask_proj must map 128 -> kernel dimension"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ShapeError(msg)

    @property
    def n_slots(self):
        return self.attn_proj.out_features

    @property
    def n_queries(self):
        return self.bottleneck.out_features

    _NAMES = ("attn_proj", "bottleneck", "kernel_head", "class_head", "obj_head", "mask_proj")

    def tensors(self):
        out = {}
        for name in self._NAMES:
            lin = getattr(self, name)
            out[f"decoder.{name}.weight"] = lin.weight
            out[f"decoder.{name}.bias"] = lin.bias
        return out

    @classmethod
    def from_tensors(cls, t):
        return cls(**{n: Linear(t[f"decoder.{n}.weight"], t[f"decoder.{n}.bias"]) for n in cls._NAMES})

    @classmethod
    def seeded(cls, seed, n_slots=N_SLOTS, n_queries=N_QUERIES, kernel_dim=KERNEL_DIM, rng=None):
        rng = np.random.default_rng(seed) if rng is None else rng
        return cls(
            attn_proj=Linear.random(rng, n_slots, OUTPUT_CHANNELS),
            bottleneck=Linear.random(rng, n_queries, n_slots),
            kernel_head=Linear.random(rng, kernel_dim, OUTPUT_CHANNELS),
            class_head=Linear.random(rng, N_CLASSES, OUTPUT_CHANNELS),
            obj_head=Linear.random(rng, 1, OUTPUT_CHANNELS),
            mask_proj=Linear.random(rng, kernel_dim, OUTPUT_CHANNELS),
        )


@dataclass(frozen=True, eq=False)
class DerivedCenters:
    centers3d: np.ndarray
    centers2d: np.ndarray
    valid: np.ndarray
    face_index: np.ndarray  # chosen face per instance, -1 if invalid


def _values(f):
    return f.values if isinstance(f, FaceFeatureSet) else np.asarray(f, dtype=np.float64)


def normalize_attention(a):
    """Rows scaled to sum to one; rows whose raw sum is below 1e-12 become uniform."""
    a = np.asarray(a, dtype=np.float64)
    s = a.sum(axis=1, keepdims=True)
    out = np.empty_like(a)
    ok = s[:, 0] >= UNIFORM_EPS
    out[ok] = a[ok] / s[ok]
    out[~ok] = 1.0 / a.shape[1]
    return out


def attention_pool(f, w):
    """Return ``(A, F_inst)``: sigmoid attention ``(K, M)`` and pooled queries ``(K, 128)``."""
    x = _values(f)
    if x.shape[0] != OUTPUT_CHANNELS:
        raise ShapeError(f"features must have {OUTPUT_CHANNELS} channels")
    a = sigmoid(w.attn_proj(x))
    return a, normalize_attention(a) @ x.T


def decode_instances(f_inst, f, w):
    """Heads on the bottlenecked queries: ``(mask_logits (N, M), class_logits (N, 17), objectness (N,))``."""
    x = _values(f)
    f_inst = np.asarray(f_inst, dtype=np.float64)
    if f_inst.shape != (w.n_slots, OUTPUT_CHANNELS):
        raise ShapeError(f"F_inst must be ({w.n_slots}, {OUTPUT_CHANNELS}), got {f_inst.shape}")
    q = w.bottleneck(f_inst)                 # (N, 128)
    kernels = w.kernel_head(q.T).T           # (N, D)
    mask_feats = w.mask_proj(x)              # (D, M)
    mask_logits = kernels @ mask_feats
    class_logits = w.class_head(q.T).T
    objectness = w.obj_head(q.T)[0]
    return mask_logits, class_logits, objectness


def active_faces(mask_logits, threshold=MASK_THRESHOLD):
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    return sigmoid(np.asarray(mask_logits, dtype=np.float64)) > threshold


def derive_centers(mask_logits, geom, cmap, threshold=MASK_THRESHOLD):
    """Per instance: centroid of the active face centers, snapped to the nearest active face.

    Ties in distance go to the lowest face index. Instances with an empty
    thresholded mask are marked invalid and get NaN centers.
    """
    act = active_faces(mask_logits, threshold)
    n = act.shape[0]
    centers = geom.centers
    coords = cmap.coords
    c3 = np.full((n, 3), np.nan)
    c2 = np.full((n, 2), np.nan)
    face = np.full(n, -1, dtype=np.int64)
    for i in range(n):
        idx = np.flatnonzero(act[i])
        if idx.size == 0:
            continue
        pts = centers[idx]
        centroid = pts.mean(axis=0)
        d2 = ((pts - centroid) ** 2).sum(axis=1)
        j = idx[int(np.argmin(d2))]
        face[i] = j
        c3[i] = centers[j]
        c2[i] = coords[j]
    return DerivedCenters(c3, c2, face >= 0, face)


def predict_instances(f, geom, cmap, w, threshold=MASK_THRESHOLD):
    """Attention pooling, decoding and center derivation in one step."""
    _, f_inst = attention_pool(f, w)
    mask_logits, class_logits, objectness = decode_instances(f_inst, f, w)
    dc = derive_centers(mask_logits, geom, cmap, threshold)
    return InstancePrediction(mask_logits, class_logits, objectness, dc.centers3d, dc.centers2d, dc.valid)


def pseudo_mask(centers2d, valid, cmap, labels):
    """Class-consistent pseudo-masks ``(N, M)``.

    A valid instance takes the label of the face whose pixel is nearest to its
    2D center (lowest index on ties) and its row marks every face with that
    label. Invalid instances get all-zero rows.
    """
    labels = np.asarray(labels)
    coords = cmap.coords
    if labels.shape != (coords.shape[0],):
        raise ShapeError("labels must have one entry per face")
    valid = np.asarray(valid, dtype=bool)
    c2 = np.asarray(centers2d, dtype=np.float64).reshape(-1, 2)
    rows = np.zeros((c2.shape[0], coords.shape[0]), dtype=np.uint8)
    for i in np.flatnonzero(valid):
        d2 = ((coords - c2[i]) ** 2).sum(axis=1)
        rows[i] = labels == labels[int(np.argmin(d2))]
    return rows


def pseudo_mask_loss(mask_logits, pm):
    logits = np.asarray(mask_logits, dtype=np.float64)
    pm = np.asarray(pm, dtype=np.float64)
    if logits.shape != pm.shape:
        raise ShapeError(f"mask logits {logits.shape} and pseudo-mask {pm.shape} differ in shape")
    if logits.size == 0:
        return 0.0
    return float(bce_with_logits(logits, pm).mean())


def smooth_l1(x, beta=1.0):
    ax = np.abs(x)
    return np.where(ax < beta, 0.5 * ax * ax / beta, ax - 0.5 * beta)


def center_loss(pred_centers, gt_centers, beta=1.0):
    """Mean over matched pairs of the xyz-summed Smooth-L1 distance."""
    p = np.asarray(pred_centers, dtype=np.float64).reshape(-1, 3)
    g = np.asarray(gt_centers, dtype=np.float64).reshape(-1, 3)
    if p.shape != g.shape:
        raise ShapeError(f"{p.shape[0]} predicted centers vs {g.shape[0]} ground-truth centers")
    if p.shape[0] == 0:
        return 0.0
    return float(smooth_l1(p - g, beta).sum(axis=1).mean())


class InstanceDecoder(BaseEstimator):
    """Estimator wrapper: ``predict`` turns ``(M, 128)`` fused features into mask, class and objectness logits."""

    def __init__(self, n_slots=N_SLOTS, n_queries=N_QUERIES, kernel_dim=KERNEL_DIM, seed=0, weights=None):
        self.n_slots = n_slots
        self.n_queries = n_queries
        self.kernel_dim = kernel_dim
        self.seed = seed
        self.weights = weights

    def fit(self, X, y=None):
        check_matrix(X, "X", shape=(None, OUTPUT_CHANNELS))
        self.weights_ = self.weights if self.weights is not None else DecoderWeights.seeded(
            self.seed, self.n_slots, self.n_queries, self.kernel_dim)
        self.n_features_in_ = OUTPUT_CHANNELS
        return self

    def predict(self, X):
        check_is_fitted(self, "weights_")
        x = check_matrix(X, "X", shape=(None, OUTPUT_CHANNELS)).T
        _, f_inst = attention_pool(x, self.weights_)
        return decode_instances(f_inst, x, self.weights_)
