"""Dual-stream geometric encoder at toy scale.

Every face gets a 24-channel descriptor (coordinates and normals of its center
and three vertices). Coordinate channels 0..11 and normal channels 12..23 run
through separate streams: a fixed feature-transform matrix, then three stages
of k-NN attentive aggregation. The stage outputs of both streams are
concatenated and mapped linearly to 128 channels.

Weights are either loaded from a bundle or drawn from a seeded generator; there
is no training here.
"""

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_matrix
from .exceptions import ShapeError
from .layers import Linear

INPUT_CHANNELS = 24
STREAM_CHANNELS = 12
OUTPUT_CHANNELS = 128
DEFAULT_K = 32
DEFAULT_HIDDEN = 64
N_STAGES = 3
STAGES = ("input24", "stream_c", "stream_n", "fused128")


@dataclass(frozen=True, eq=False)
class FaceFeatureSet:
    stage: str
    values: np.ndarray  # (channels, M)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown feature stage {self.stage!r}")
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ShapeError(f"feature values must be (channels, M), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ShapeError(f"{self.stage} features contain NaN or Inf")
        object.__setattr__(self, "values", v)

    @property
    def n_faces(self):
        return self.values.shape[1]


@dataclass(frozen=True, eq=False)
class KnnGraph:
    k: int
    neighbors: np.ndarray  # (M, k) face indices, nearest first
    built_on: str = "coordinates"


@dataclass(frozen=True, eq=False)
class EncoderWeights:
    ftm_c: np.ndarray
    ftm_n: np.ndarray
    coord_stages: tuple  # ((phi, psi), ...) one pair per stage
    normal_stages: tuple
    fuse: Linear
    source: str = "seed:0"

    def __post_init__(self):
        for name in ("ftm_c", "ftm_n"):
            m = np.asarray(getattr(self, name), dtype=np.float64)
            if m.shape != (STREAM_CHANNELS, STREAM_CHANNELS):
                raise ShapeError(f"{name} must be {STREAM_CHANNELS}x{STREAM_CHANNELS}, got {m.shape}")
            object.__setattr__(self, name, m)
        width = STREAM_CHANNELS
        total = 0
        for stages in (self.coord_stages, self.normal_stages):
            if len(stages) != N_STAGES:
                raise ShapeError(f"each stream needs {N_STAGES} stages")
            width = STREAM_CHANNELS
            for phi, psi in stages:
                if phi.in_features != 2 * width or psi.in_features != width:
                    raise ShapeError("stage input widths are inconsistent")
                if phi.out_features != psi.out_features:
                    raise ShapeError("phi and psi must have the same output width")
                width = psi.out_features
                total += width
        if self.fuse.in_features != total or self.fuse.out_features != OUTPUT_CHANNELS:
            raise ShapeError(f"fuse map must be {total} -> {OUTPUT_CHANNELS}")

    @property
    def hidden(self):
        return self.coord_stages[0][1].out_features

    def tensors(self):
        out = {"encoder.ftm_c": self.ftm_c, "encoder.ftm_n": self.ftm_n,
               "encoder.fuse.weight": self.fuse.weight, "encoder.fuse.bias": self.fuse.bias}
        for stream, stages in (("coord", self.coord_stages), ("normal", self.normal_stages)):
            for s, (phi, psi) in enumerate(stages):
                pre = f"encoder.{stream}.stage{s}"
                out[f"{pre}.phi.weight"] = phi.weight
                out[f"{pre}.phi.bias"] = phi.bias
                out[f"{pre}.psi.weight"] = psi.weight
                out[f"{pre}.psi.bias"] = psi.bias
        return out

    @classmethod
    def from_tensors(cls, t, source="file"):
        stages = {}
        for stream in ("coord", "normal"):
            stages[stream] = tuple(
                (Linear(t[f"encoder.{stream}.stage{s}.phi.weight"], t[f"encoder.{stream}.stage{s}.phi.bias"]),
                 Linear(t[f"encoder.{stream}.stage{s}.psi.weight"], t[f"encoder.{stream}.stage{s}.psi.bias"]))
                for s in range(N_STAGES))
        return cls(t["encoder.ftm_c"], t["encoder.ftm_n"], stages["coord"], stages["normal"],
                   Linear(t["encoder.fuse.weight"], t["encoder.fuse.bias"]), source=source)

    @classmethod
    def seeded(cls, seed, hidden=DEFAULT_HIDDEN, rng=None):
        """Uniform(-0.1, 0.1) weights from ``numpy.random.default_rng(seed)``.

        The feature-transform matrices are identity plus the same uniform noise,
        so the untrained transform stays close to a rotation-free pass-through.
        """
        rng = np.random.default_rng(seed) if rng is None else rng
        ftm_c = np.eye(STREAM_CHANNELS) + rng.uniform(-0.1, 0.1, (STREAM_CHANNELS, STREAM_CHANNELS)).astype(np.float32)
        ftm_n = np.eye(STREAM_CHANNELS) + rng.uniform(-0.1, 0.1, (STREAM_CHANNELS, STREAM_CHANNELS)).astype(np.float32)
        streams = []
        for _ in range(2):
            width, stages = STREAM_CHANNELS, []
            for _s in range(N_STAGES):
                stages.append((Linear.random(rng, hidden, 2 * width), Linear.random(rng, hidden, width)))
                width = hidden
            streams.append(tuple(stages))
        fuse = Linear.random(rng, OUTPUT_CHANNELS, 2 * N_STAGES * hidden)
        return cls(ftm_c.astype(np.float32).astype(np.float64), ftm_n.astype(np.float32).astype(np.float64),
                   streams[0], streams[1], fuse, source=f"seed:{seed}")


def build_input_features(mesh, geom):
    """Stack the 24-channel per-face descriptor.

    Channel order: center xyz, v1 xyz, v2 xyz, v3 xyz, face normal xyz,
    n1 xyz, n2 xyz, n3 xyz.
    """
    f = mesh.faces
    v = mesh.vertices
    vn = geom.vertex_normals
    cols = [geom.centers, v[f[:, 0]], v[f[:, 1]], v[f[:, 2]],
            geom.normals, vn[f[:, 0]], vn[f[:, 1]], vn[f[:, 2]]]
    return FaceFeatureSet("input24", np.concatenate(cols, axis=1).T)


def knn_indices(points, k, chunk=512):
    """Exact Euclidean k-NN excluding self; equal distances resolve to the lower index.

    Neighbors come back sorted by (distance, index).
    """
    pts = np.asarray(points, dtype=np.float64)
    m = pts.shape[0]
    k = int(k)
    if k < 1 or k >= m:
        raise ShapeError(f"k must satisfy 1 <= k < M (k={k}, M={m})")
    out = np.empty((m, k), dtype=np.int64)
    for start in range(0, m, chunk):
        rows = np.arange(start, min(start + chunk, m))
        diff = pts[rows, None, :] - pts[None, :, :]
        d = np.einsum("ijk,ijk->ij", diff, diff)
        d[np.arange(rows.size), rows] = np.inf
        thr = np.partition(d, k - 1, axis=1)[:, k - 1:k]
        below = d < thr
        tied = d == thr
        need = k - below.sum(axis=1, keepdims=True)
        take = below | (tied & (np.cumsum(tied, axis=1) <= need))
        idx = np.nonzero(take)[1].reshape(rows.size, k)
        dsel = np.take_along_axis(d, idx, axis=1)
        order = np.lexsort((idx, dsel), axis=1)
        out[rows] = np.take_along_axis(idx, order, axis=1)
    return out


def build_knn(geom, k=DEFAULT_K, on="coordinates"):
    if on == "coordinates":
        pts = geom.centers
    elif on == "normals":
        pts = geom.normals
    else:
        raise ValueError(f"on must be 'coordinates' or 'normals', got {on!r}")
    return KnnGraph(k=int(k), neighbors=knn_indices(pts, k), built_on=on)


def attentive_aggregate(features, graph, phi, psi, return_weights=False):
    """One stage of local attentive aggregation.

    For face i with neighbors j: ``e_ij = phi([p_i - p_j, p_j])``, softmax over j
    taken separately for every output channel, ``g_i = sum_j a_ij * psi(p_j)``.
    ``features`` is ``(C, M)``; the result is ``(C_out, M)``. With
    ``return_weights`` the attention weights ``(M, k, C_out)`` are returned too.
    """
    p = features.values if isinstance(features, FaceFeatureSet) else np.asarray(features, dtype=np.float64)
    c, m = p.shape
    nbr = graph.neighbors if isinstance(graph, KnnGraph) else np.asarray(graph)
    if nbr.shape[0] != m:
        raise ShapeError(f"graph has {nbr.shape[0]} rows, features have {m} faces")
    if phi.in_features != 2 * c or psi.in_features != c:
        raise ShapeError(f"phi expects {phi.in_features // 2} channels, psi {psi.in_features}, features have {c}")
    w_diff, w_nbr = phi.weight[:, :c], phi.weight[:, c:]
    # phi is linear: phi([p_i - p_j, p_j]) = Wd p_i - Wd p_j + Wn p_j + b
    u = (w_diff @ p).T            # (M, H)
    v = (w_nbr @ p).T - u         # (M, H)
    vals = psi(p).T               # (M, H)
    e = (u + phi.bias)[:, None, :] + v[nbr]          # (M, k, H)
    e -= e.max(axis=1, keepdims=True)
    a = np.exp(e)
    a /= a.sum(axis=1, keepdims=True)
    g = np.einsum("mkh,mkh->mh", a, vals[nbr])
    if return_weights:
        return g.T, a
    return g.T


def encode_stream(x, graph, ftm, stages):
    h = ftm @ x
    outs = []
    for phi, psi in stages:
        h = attentive_aggregate(h, graph, phi, psi)
        outs.append(h)
    return outs


def encode(mesh, geom, weights, k=DEFAULT_K, graphs=None):
    """Map a mesh to 128-channel per-face features ``(128, M)``.

    Reordering faces reorders the output columns identically, bit for bit, as
    long as no k-NN distances tie and no two faces share a descriptor; with
    ties, the lower-index rule depends on face order.
    """
    feats = build_input_features(mesh, geom)
    return encode_features(feats.values, weights, k=k, graphs=graphs)


def encode_features(p24, weights, k=DEFAULT_K, graphs=None):
    p24 = np.asarray(p24, dtype=np.float64)
    if p24.shape[0] != INPUT_CHANNELS:
        raise ShapeError(f"expected {INPUT_CHANNELS} input channels, got {p24.shape[0]}")
    if graphs is None:
        graphs = (KnnGraph(k, knn_indices(p24[0:3].T, k), "coordinates"),
                  KnnGraph(k, knn_indices(p24[12:15].T, k), "normals"))
    # Work in a canonical face order (sorted by descriptor values) and undo it at the end.
    # BLAS rounding depends on a column's position, so this is what makes the output
    # exactly equivariant to face reordering.
    order = np.lexsort(p24[::-1])
    inv = np.empty_like(order)
    inv[order] = np.arange(order.size)
    x = p24[:, order]
    g_c, g_n = (inv[_neighbors(g)[order]] for g in graphs)
    outs = encode_stream(x[:STREAM_CHANNELS], g_c, weights.ftm_c, weights.coord_stages)
    outs += encode_stream(x[STREAM_CHANNELS:], g_n, weights.ftm_n, weights.normal_stages)
    return FaceFeatureSet("fused128", weights.fuse(np.concatenate(outs, axis=0))[:, inv])


def _neighbors(graph):
    return graph.neighbors if isinstance(graph, KnnGraph) else np.asarray(graph)


class DualStreamEncoder(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``transform`` maps ``(M, 24)`` descriptors to ``(M, 128)`` features.

    ``fit`` only materialises the weights (from ``weights`` if given, otherwise
    seeded); the data passed to it is used for shape checks.
    """

    def __init__(self, k=DEFAULT_K, hidden=DEFAULT_HIDDEN, seed=0, weights=None):
        self.k = k
        self.hidden = hidden
        self.seed = seed
        self.weights = weights

    def fit(self, X, y=None):
        check_matrix(X, "X", shape=(None, INPUT_CHANNELS))
        self.weights_ = self.weights if self.weights is not None else EncoderWeights.seeded(self.seed, self.hidden)
        self.n_features_in_ = INPUT_CHANNELS
        return self

    def transform(self, X):
        check_is_fitted(self, "weights_")
        X = check_matrix(X, "X", shape=(None, INPUT_CHANNELS))
        return encode_features(X.T, self.weights_, k=self.k).values.T
