"""Order-aware Hungarian matching between predicted instances and ground-truth teeth.

Similarity is built in stages: mask Dice and class probability combine into a
base score, a center-distance penalty (normalised by the scene diagonal, with
a drift margin) and an arch-order penalty (normalised rank along the arch
versus the canonical FDI position, with a tolerance band) are subtracted, and
the negated result is solved as a min-cost assignment.
"""

import itertools
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import check_matrix
from .exceptions import DegenerateInputError, SchemaError, ShapeError
from .layers import sigmoid
from .mesh import N_CLASSES

DICE_EPS = 1e-6
FORBIDDEN_COST = 1e9
N_TOOTH_CLASSES = 16

# Per-jaw canonical arch position (0 = patient's right third molar,
# 15 = patient's left third molar, low x to high x). Classes 1..8 and 9..16 run
# central incisor -> third molar within a quadrant. In the upper jaw classes 1..8
# are the patient's right quadrant; in the lower jaw they are the left quadrant.
FDI_POSITION = {
    "upper": {**{c: 8 - c for c in range(1, 9)}, **{c: c - 1 for c in range(9, 17)}},
    "lower": {**{c: 16 - c for c in range(9, 17)}, **{c: c + 7 for c in range(1, 9)}},
}
# two-digit FDI code for each class id, per jaw
FDI_CODE = {
    "upper": {**{c: 10 + c for c in range(1, 9)}, **{c: 12 + c for c in range(9, 17)}},
    "lower": {**{c: 30 + c for c in range(1, 9)}, **{c: 32 + c for c in range(9, 17)}},
}


@dataclass(frozen=True)
class MatchConfig:
    alpha: float = 0.8
    beta: float = 0.2
    lambda_cent: float = 0.5
    delta_drift: float = 0.10
    lambda_ord: float = 4.0
    delta_ord: float = 0.15

    def __post_init__(self):
        for name in ("alpha", "beta", "lambda_cent", "lambda_ord"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise SchemaError(f"{name} must be finite and >= 0, got {v}")
        for name in ("delta_drift", "delta_ord"):
            v = getattr(self, name)
            if not (0 <= v < 1):
                raise SchemaError(f"{name} must lie in [0, 1), got {v}")


@dataclass(frozen=True, eq=False)
class GroundTruth:
    masks: np.ndarray      # (L, M) binary
    labels: np.ndarray     # (L,) in 1..16
    centers3d: np.ndarray  # (L, 3) class-mean face centers
    jaw: str = "upper"
    instance_ids: np.ndarray = None

    def __post_init__(self):
        masks = np.asarray(self.masks).astype(np.uint8)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        centers = np.asarray(self.centers3d, dtype=np.float64).reshape(-1, 3)
        n = labels.shape[0]
        if not 1 <= n <= N_TOOTH_CLASSES:
            raise SchemaError(f"ground truth needs 1..16 teeth, got {n}")
        if masks.ndim != 2 or masks.shape[0] != n or centers.shape[0] != n:
            raise ShapeError("ground-truth masks, labels and centers disagree in length")
        if labels.min() < 1 or labels.max() > N_TOOTH_CLASSES:
            raise SchemaError("ground-truth labels must lie in 1..16")
        if np.unique(labels).size != n:
            raise SchemaError("ground-truth labels must be distinct within a scan")
        if np.any(masks.sum(axis=1) == 0):
            raise SchemaError("ground-truth masks must be nonempty")
        if self.jaw not in FDI_POSITION:
            raise SchemaError(f"unknown jaw {self.jaw!r}")
        ids = np.arange(n) if self.instance_ids is None else np.asarray(self.instance_ids, dtype=np.int64)
        object.__setattr__(self, "masks", masks)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "centers3d", centers)
        object.__setattr__(self, "instance_ids", ids)

    @property
    def n_teeth(self):
        return self.labels.shape[0]

    @property
    def n_faces(self):
        return self.masks.shape[1]


@dataclass(frozen=True, eq=False)
class SimilarityMatrix:
    values: np.ndarray
    stage: str


@dataclass(frozen=True)
class Assignment:
    pairs: tuple             # ((prediction index, ground-truth index), ...) sorted
    total_cost: float = 0.0

    def __post_init__(self):
        rows = [p for p, _ in self.pairs]
        cols = [g for _, g in self.pairs]
        if len(set(rows)) != len(rows) or len(set(cols)) != len(cols):
            raise ValueError("assignment repeats an index")

    def __len__(self):
        return len(self.pairs)

    def as_dict(self):
        return {int(p): int(g) for p, g in self.pairs}


@dataclass(frozen=True, eq=False)
class MatchTrail:
    s_mask: np.ndarray
    s_cls: np.ndarray
    base: SimilarityMatrix
    center_refined: SimilarityMatrix
    order_refined: SimilarityMatrix
    ranks: np.ndarray
    ordinals: np.ndarray
    cost: np.ndarray
    extras: dict = field(default_factory=dict)


def ground_truth_from_mesh(mesh, geom):
    """One ground-truth row per tooth instance, ordered by instance id."""
    inst = mesh.face_instance_ids
    ids = np.unique(inst[inst >= 0])
    if ids.size == 0:
        raise DegenerateInputError("mesh has no tooth instances")
    masks = inst[None, :] == ids[:, None]
    labels = np.array([mesh.face_labels[m.argmax()] for m in masks])
    centers = np.stack([geom.centers[m].mean(axis=0) for m in masks])
    return GroundTruth(masks, labels, centers, jaw=mesh.jaw, instance_ids=ids)


# ---------------------------------------------------------------- similarity

def dice_matrix(mask_probs, gt):
    probs = check_matrix(mask_probs, "mask_probs")
    t = gt.masks.astype(np.float64) if isinstance(gt, GroundTruth) else np.asarray(gt, dtype=np.float64)
    if probs.shape[1] != t.shape[1]:
        raise ShapeError(f"predictions cover {probs.shape[1]} faces, ground truth {t.shape[1]}")
    inter = probs @ t.T
    denom = probs.sum(axis=1)[:, None] + t.sum(axis=1)[None, :]
    return (2.0 * inter + DICE_EPS) / (denom + DICE_EPS)


def class_similarity(class_logits, labels):
    logits = check_matrix(class_logits, "class_logits", shape=(None, N_CLASSES))
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= N_CLASSES):
        raise SchemaError("label out of range for the class logits")
    return sigmoid(logits)[:, labels]


def base_similarity(s_mask, class_logits, gt, cfg=MatchConfig()):
    s_cls = class_similarity(class_logits, gt.labels)
    s_mask = np.asarray(s_mask, dtype=np.float64)
    if s_mask.shape != s_cls.shape:
        raise ShapeError(f"S_mask {s_mask.shape} vs S_cls {s_cls.shape}")
    return SimilarityMatrix(s_mask ** cfg.alpha * s_cls ** cfg.beta, "base")


def relu(x):
    return np.maximum(x, 0.0)


def center_distances(pred_centers, gt_centers, diagonal):
    if not diagonal > 0:
        raise DegenerateInputError("scene diagonal must be positive")
    p = np.asarray(pred_centers, dtype=np.float64).reshape(-1, 3)
    g = np.asarray(gt_centers, dtype=np.float64).reshape(-1, 3)
    return np.abs(p[:, None, :] - g[None, :, :]).sum(axis=2) / diagonal


def center_refine(c, pred_centers, gt, scene, cfg=MatchConfig(), valid=None):
    """Subtract ``lambda_cent * relu(L1 distance / diagonal - delta_drift)``; invalid rows become -inf."""
    vals = c.values if isinstance(c, SimilarityMatrix) else np.asarray(c, dtype=np.float64)
    n = vals.shape[0]
    valid = np.ones(n, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    diag = scene.diagonal if hasattr(scene, "diagonal") else float(scene)
    centers = np.asarray(pred_centers, dtype=np.float64).reshape(-1, 3)
    safe = np.where(valid[:, None], centers, 0.0)
    if not np.all(np.isfinite(safe)):
        raise ShapeError("valid predictions must have finite centers")
    d = center_distances(safe, gt.centers3d, diag)
    out = vals - cfg.lambda_cent * relu(d - cfg.delta_drift)
    out[~valid] = -np.inf
    return SimilarityMatrix(out, "center_refined")


def order_ranks(pred_centers3d, valid, arch_axis=(1.0, 0.0, 0.0)):
    """Normalised rank along the arch for each valid prediction (NaN for invalid ones).

    Ties in the arch-axis projection fall back to the y coordinate, then to the index.
    A single valid prediction gets rank 0.5.
    """
    centers = np.asarray(pred_centers3d, dtype=np.float64).reshape(-1, 3)
    valid = np.asarray(valid, dtype=bool)
    idx = np.flatnonzero(valid)
    if idx.size == 0:
        raise DegenerateInputError("no valid predictions to rank")
    axis = np.asarray(arch_axis, dtype=np.float64)
    proj = centers[idx] @ axis
    order = np.lexsort((idx, centers[idx, 1], proj))
    r = np.full(centers.shape[0], np.nan)
    n = idx.size
    if n == 1:
        r[idx] = 0.5
    else:
        r[idx[order]] = np.arange(n) / (n - 1)
    return r


def fdi_to_ordinal(label, jaw="upper"):
    try:
        return FDI_POSITION[jaw][int(label)] / 15.0
    except KeyError:
        raise SchemaError(f"no arch position for class {label!r} in jaw {jaw!r}") from None


def order_refine(c_cent, r, t, cfg=MatchConfig()):
    vals = c_cent.values if isinstance(c_cent, SimilarityMatrix) else np.asarray(c_cent, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    gap = np.abs(r[:, None] - t[None, :])
    with np.errstate(invalid="ignore"):
        pen = cfg.lambda_ord * relu(gap - cfg.delta_ord)
    out = vals - np.where(np.isnan(pen), 0.0, pen)
    out[np.isnan(r)] = -np.inf
    return SimilarityMatrix(out, "order_refined")


# ---------------------------------------------------------------- assignment

def assignment_cost(cost, pairs):
    """Sum of ``cost[i, j]`` over ``pairs`` in row order."""
    total = 0.0
    for i, j in sorted(pairs):
        total += float(cost[i][j])
    return total


def _shortest_augmenting_path(a):
    """Square min-cost assignment with dual potentials (O(n^3)).

    Returns ``(row_to_col, u, v)`` with ``a[i, j] - u[i] - v[j] >= 0`` and equality on matched edges.
    """
    n = a.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)      # p[j]: row (1-based) matched to column j
    way = np.zeros(n + 1, dtype=np.int64)
    cost = np.zeros((n + 1, n + 1))
    cost[1:, 1:] = a
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used
            free[0] = False
            cur = cost[i0] - u[i0] - v
            better = free & (cur < minv)
            minv[better] = cur[better]
            way[better] = j0
            cand = np.where(free, minv, np.inf)
            j1 = int(np.argmin(cand))
            delta = cand[j1]
            u[p[used]] += delta
            v[used] -= delta
            minv[free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    row_to_col = np.empty(n, dtype=np.int64)
    row_to_col[p[1:] - 1] = np.arange(n)
    return row_to_col, u[1:], v[1:]


def _lexicographic_optimum(reduced, row_to_col, tol):
    """Among optimal assignments, move to the one with the smallest column vector.

    Works on reduced costs (>= 0, zero on the current matching): forcing row i
    onto column j costs ``reduced[i, j]`` plus the cheapest reroute of j's owner
    that ends on i's old column, restricted to rows not yet fixed.
    """
    n = reduced.shape[0]
    m2c = row_to_col.copy()
    c2r = np.empty(n, dtype=np.int64)
    c2r[m2c] = np.arange(n)
    for i in range(n):
        target = m2c[i]
        if target == 0:
            continue
        rows = np.arange(i + 1, n)  # rows still free to move
        if rows.size == 0:
            continue
        # backward Dijkstra: dist[r] = cheapest chain starting with row r that ends by taking `target`
        dist = np.full(n, np.inf)
        nxt = np.full(n, -1, dtype=np.int64)
        dist[rows] = reduced[rows, target]
        done = np.zeros(n, dtype=bool)
        active = np.zeros(n, dtype=bool)
        active[rows] = True
        while True:
            cand = np.where(active & ~done, dist, np.inf)
            r_star = int(np.argmin(cand))
            if not np.isfinite(cand[r_star]):
                break
            done[r_star] = True
            via = reduced[:, m2c[r_star]] + dist[r_star]
            upd = active & ~done & (via < dist)
            dist[upd] = via[upd]
            nxt[upd] = r_star
        for j in range(target):
            owner = c2r[j]
            if owner <= i:
                continue
            if reduced[i, j] + dist[owner] > tol:
                continue
            chain = [owner]
            while nxt[chain[-1]] >= 0:
                chain.append(nxt[chain[-1]])
            new_cols = [m2c[nxt[r]] if nxt[r] >= 0 else target for r in chain]
            for r, c in zip(chain, new_cols):
                m2c[r] = c
                c2r[c] = r
            m2c[i] = j
            c2r[j] = i
            break
    return m2c


def hungarian(cost):
    """Minimum-cost one-to-one assignment of ``min(n, m)`` pairs.

    Rectangular inputs are padded to square with a constant (which does not
    change the optimum). Among optimal solutions the one whose padded
    row-to-column vector is lexicographically smallest is returned.
    """
    a = np.asarray(cost, dtype=np.float64)
    if a.ndim != 2 or a.size == 0:
        raise ShapeError("cost matrix must be a nonempty 2-D array")
    if not np.all(np.isfinite(a)):
        raise ShapeError("cost matrix must be finite; map forbidden pairs to a large finite cost first")
    n, m = a.shape
    s = max(n, m)
    sq = np.zeros((s, s))
    sq[:n, :m] = a
    row_to_col, u, v = _shortest_augmenting_path(sq)
    reduced = np.maximum(sq - u[:, None] - v[None, :], 0.0)
    tol = 1e-9 * max(1.0, float(np.abs(a).max()))
    row_to_col = _lexicographic_optimum(reduced, row_to_col, tol)
    pairs = tuple((int(i), int(row_to_col[i])) for i in range(n) if row_to_col[i] < m)
    return Assignment(pairs, assignment_cost(a, pairs))


def brute_force_assignment(cost):
    """Exhaustive minimum over all injections of the smaller side into the larger.

    Returns ``(pairs, total)``; totals are accumulated in row order so they are
    bitwise comparable with :func:`assignment_cost`.
    """
    a = np.asarray(cost, dtype=np.float64)
    n, m = a.shape
    if n <= m:
        perms = np.array(list(itertools.permutations(range(m), n)), dtype=np.int64).reshape(-1, n)
        contrib = a[np.arange(n)[None, :], perms]
        total = np.zeros(perms.shape[0])
        for r in range(n):
            total = total + contrib[:, r]
        best = int(np.argmin(total))
        pairs = tuple((r, int(perms[best, r])) for r in range(n))
    else:
        perms = np.array(list(itertools.permutations(range(n), m)), dtype=np.int64).reshape(-1, m)
        contrib = np.zeros((perms.shape[0], n))
        for c in range(m):
            contrib[np.arange(perms.shape[0]), perms[:, c]] = a[perms[:, c], c]
        total = np.zeros(perms.shape[0])
        for r in range(n):
            total = total + contrib[:, r]
        best = int(np.argmin(total))
        pairs = tuple(sorted((int(perms[best, c]), c) for c in range(m)))
    return pairs, float(total[best])


def subset_dp_assignment(cost):
    """Exact minimum by dynamic programming over subsets of the larger side.

    Exhaustive like :func:`brute_force_assignment` but O(2^m * m * n), usable up
    to about 20 columns. Totals are accumulated in row order.
    """
    a = np.asarray(cost, dtype=np.float64)
    transposed = a.shape[0] > a.shape[1]
    if transposed:
        a = a.T
    n, m = a.shape
    if m > 22:
        raise ShapeError("subset DP limited to 22 columns")
    size = 1 << m
    masks = np.arange(size)
    popcount = np.zeros(size, dtype=np.int64)
    for j in range(m):
        popcount += (masks >> j) & 1
    dp = np.full(size, np.inf)
    dp[0] = 0.0
    choice = np.full(size, -1, dtype=np.int64)
    for r in range(n):
        layer = masks[popcount == r]
        for j in range(m):
            src = layer[(layer >> j) & 1 == 0]
            dst = src | (1 << j)
            val = dp[src] + a[r, j]
            better = val < dp[dst]
            dp[dst[better]] = val[better]
            choice[dst[better]] = j
    final = masks[popcount == n]
    best = int(final[np.argmin(dp[final])])
    total = float(dp[best])
    cols = []
    mask = best
    for r in range(n - 1, -1, -1):
        j = int(choice[mask])
        cols.append(j)
        mask ^= 1 << j
    cols.reverse()
    pairs = [(r, c) for r, c in enumerate(cols)]
    if transposed:
        pairs = [(c, r) for r, c in pairs]
    return tuple(sorted(pairs)), total


# ---------------------------------------------------------------- full procedure

def fhm_match(pred, gt, scene, cfg=MatchConfig()):
    """Run the staged similarity construction and solve it; returns ``(Assignment, MatchTrail)``.

    Predictions with empty masks are excluded. The returned pairs index the
    full prediction list and the ground-truth rows.
    """
    valid = np.asarray(pred.valid, dtype=bool)
    if not valid.any():
        raise DegenerateInputError("no valid predictions to match")
    if pred.n_faces != gt.n_faces:
        raise ShapeError(f"prediction covers {pred.n_faces} faces, ground truth {gt.n_faces}")
    s_mask = dice_matrix(sigmoid(pred.mask_logits), gt)
    base = base_similarity(s_mask, pred.class_logits, gt, cfg)
    c_cent = center_refine(base, pred.centers3d, gt, scene, cfg, valid=valid)
    ranks = order_ranks(pred.centers3d, valid, scene.arch_axis)
    ordinals = np.array([fdi_to_ordinal(y, gt.jaw) for y in gt.labels])
    c_ord = order_refine(c_cent, ranks, ordinals, cfg)
    vidx = np.flatnonzero(valid)
    cost = -c_ord.values[vidx]
    sub = hungarian(cost)
    pairs = tuple(sorted((int(vidx[i]), int(l)) for i, l in sub.pairs))
    trail = MatchTrail(
        s_mask=s_mask, s_cls=class_similarity(pred.class_logits, gt.labels),
        base=base, center_refined=c_cent, order_refined=c_ord,
        ranks=ranks, ordinals=ordinals, cost=cost, extras={"valid_rows": vidx},
    )
    return Assignment(pairs, sub.total_cost), trail


class OrderAwareMatcher(BaseEstimator):
    """Estimator-style front end for :func:`fhm_match`; hyperparameters are ``get_params``-visible."""

    def __init__(self, alpha=0.8, beta=0.2, lambda_cent=0.5, delta_drift=0.10, lambda_ord=4.0, delta_ord=0.15):
        self.alpha = alpha
        self.beta = beta
        self.lambda_cent = lambda_cent
        self.delta_drift = delta_drift
        self.lambda_ord = lambda_ord
        self.delta_ord = delta_ord

    def config(self):
        return MatchConfig(**self.get_params())

    def match(self, pred, gt, scene):
        assignment, self.trail_ = fhm_match(pred, gt, scene, self.config())
        self.assignment_ = assignment
        return assignment
