"""Procedural dental arches and controlled predictions for tests and demos.

Teeth are ellipsoidal blobs placed along a parabolic arch ``y = a x^2`` in the
xy-plane, from the patient's right third molar at low x to the left third molar
at high x. A ridged gingiva strip runs underneath. All randomness flows
through ``numpy.random.default_rng(seed)``.
"""

from dataclasses import dataclass, field, fields

import numpy as np
from scipy.ndimage import gaussian_filter

from .cmr import N_QUERIES, InstancePrediction, derive_centers
from .exceptions import SchemaError
from .fhm import FDI_POSITION, ground_truth_from_mesh
from .mesh import LabeledMesh, N_CLASSES, compute_geometry, scene_frame
from .projection import EmbeddingGrid, project_occlusal

# per-quadrant tooth index (1 = central incisor .. 8 = third molar)
TOOTH_WIDTH = {1: 8.5, 2: 6.5, 3: 7.5, 4: 7.0, 5: 6.5, 6: 10.0, 7: 9.0, 8: 8.5}
TOOTH_DEPTH = {1: 3.0, 2: 2.8, 3: 3.8, 4: 4.2, 5: 4.2, 6: 5.0, 7: 4.8, 8: 4.5}
TOOTH_HEIGHT = {1: 4.5, 2: 4.2, 3: 5.0, 4: 4.0, 5: 4.0, 6: 3.6, 7: 3.5, 8: 3.3}
ARCH_CURVATURE = {"upper": 0.022, "lower": 0.026}
GAP_FRACTION = 0.84   # blob length along the arch as a fraction of the tooth's slot
RIDGE_HEIGHT = 2.0
GINGIVA_HALF_WIDTH = 9.0
LOGIT = 20.0
CLASS_LOGIT = 10.0


def quadrant_index(cls):
    return cls if cls <= 8 else cls - 8


def class_at_position(jaw):
    return {pos: cls for cls, pos in FDI_POSITION[jaw].items()}


@dataclass(frozen=True)
class ArchSpec:
    jaw: str = "upper"
    teeth_present: tuple = tuple(range(1, 17))
    crowding_jitter: float = 0.0
    tooth_faces: int = 80
    gingiva_faces: int = 2000
    seed: int = 0

    def __post_init__(self):
        if self.jaw not in FDI_POSITION:
            raise SchemaError("jaw: must be 'upper' or 'lower'")
        teeth = tuple(sorted({int(c) for c in self.teeth_present}))
        if not teeth or teeth[0] < 1 or teeth[-1] > 16:
            raise SchemaError("teeth_present: must be a nonempty subset of 1..16")
        object.__setattr__(self, "teeth_present", teeth)
        if not 0 <= self.crowding_jitter < 0.5:
            raise SchemaError("crowding_jitter: must lie in [0, 0.5)")
        if int(self.tooth_faces) < 16:
            raise SchemaError("tooth_faces: need at least 16 faces per tooth")
        if int(self.gingiva_faces) < 8:
            raise SchemaError("gingiva_faces: need at least 8 gingiva faces")

    @classmethod
    def from_dict(cls, doc):
        if not isinstance(doc, dict):
            raise SchemaError("arch spec must be a JSON object")
        known = {f.name: f for f in fields(cls)}
        unknown = set(doc) - set(known)
        if unknown:
            raise SchemaError(f"{sorted(unknown)[0]}: unknown field")
        kwargs = {}
        for name, value in doc.items():
            if name == "jaw":
                if not isinstance(value, str):
                    raise SchemaError("jaw: must be a string")
            elif name == "teeth_present":
                if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
                    raise SchemaError("teeth_present: must be a list of integers")
                value = tuple(value)
            elif name == "crowding_jitter":
                if not isinstance(value, (int, float)) or isinstance(value, bool):
                    raise SchemaError("crowding_jitter: must be a number")
            elif not isinstance(value, int) or isinstance(value, bool):
                raise SchemaError(f"{name}: must be an integer")
            kwargs[name] = value
        return cls(**kwargs)

    def as_dict(self):
        return {"jaw": self.jaw, "teeth_present": list(self.teeth_present), "crowding_jitter": self.crowding_jitter,
                "tooth_faces": self.tooth_faces, "gingiva_faces": self.gingiva_faces, "seed": self.seed}


@dataclass(frozen=True)
class PerturbSpec:
    mask_flip_rate: float = 0.0
    center_drift: float = 0.0
    class_confusion: tuple = ()   # ((from_class, to_class, probability), ...)
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.mask_flip_rate < 1:
            raise SchemaError("mask_flip_rate: must lie in [0, 1)")
        if not self.center_drift >= 0:
            raise SchemaError("center_drift: must be >= 0")
        conf = self.class_confusion
        if conf and not isinstance(conf[0], (tuple, list)):
            conf = (conf,)
        conf = tuple((int(a), int(b), float(p)) for a, b, p in conf)
        for a, b, p in conf:
            if not (0 <= a < N_CLASSES and 0 <= b < N_CLASSES and 0 <= p <= 1):
                raise SchemaError("class_confusion: classes must lie in 0..16 and probability in [0, 1]")
        object.__setattr__(self, "class_confusion", conf)


# ---------------------------------------------------------------- geometry builders

def uv_ellipsoid(center, axes, radii, target_faces):
    """Closed UV-sphere triangulation stretched to ``radii`` along the columns of ``axes``."""
    rings = max(2, int(round(np.sqrt(target_faces / 4.0))))
    slices = max(3, int(round(target_faces / (2.0 * rings))))
    stacks = rings + 1
    theta = np.pi * np.arange(1, stacks) / stacks
    phi = 2 * np.pi * np.arange(slices) / slices
    st, ph = np.meshgrid(theta, phi, indexing="ij")
    unit = np.stack([np.sin(st) * np.cos(ph), np.sin(st) * np.sin(ph), np.cos(st)], axis=-1).reshape(-1, 3)
    unit = np.vstack([[0.0, 0.0, 1.0], unit, [0.0, 0.0, -1.0]])
    verts = center + (unit * radii) @ axes.T
    top, bottom = 0, unit.shape[0] - 1

    def ring(k, l):
        return 1 + k * slices + (l % slices)

    faces = []
    for l in range(slices):
        faces.append((top, ring(0, l), ring(0, l + 1)))
        faces.append((bottom, ring(rings - 1, l + 1), ring(rings - 1, l)))
    for k in range(rings - 1):
        for l in range(slices):
            a, b = ring(k, l), ring(k, l + 1)
            c, d = ring(k + 1, l), ring(k + 1, l + 1)
            faces.append((a, c, b))
            faces.append((b, c, d))
    faces = np.array(faces, dtype=np.int64)
    return verts, _orient_outward(verts, faces, center)


def _orient_outward(verts, faces, center):
    tri = verts[faces]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    flip = np.einsum("ij,ij->i", n, tri.mean(axis=1) - center) < 0
    faces = faces.copy()
    faces[flip] = faces[flip][:, [0, 2, 1]]
    return faces


def icosphere(subdivisions=2, radius=1.0):
    """Unit icosahedron refined by midpoint subdivision and projected to the sphere."""
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
             (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    verts = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4), (11, 10, 2),
             (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9), (4, 9, 5),
             (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    for _ in range(subdivisions):
        cache = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    v = np.array(verts) * radius
    return v, _orient_outward(v, np.array(faces, dtype=np.int64), np.zeros(3))


def _arch_curve(a, n=4001, half_extent=80.0):
    x = np.linspace(-half_extent, half_extent, n)
    y = a * x * x
    seg = np.hypot(np.diff(x), np.diff(y))
    s = np.concatenate([[0.0], np.cumsum(seg)])
    s -= np.interp(0.0, x, s)
    return x, s


def _arch_point(a, x_curve, s_curve, s):
    x = np.interp(s, s_curve, x_curve)
    y = a * x * x
    tangent = np.stack([np.ones_like(x), 2 * a * x], axis=-1)
    tangent /= np.linalg.norm(tangent, axis=-1, keepdims=True)
    return np.stack([x, y], axis=-1), tangent


def _gingiva_strip(a, x_curve, s_curve, s_lo, s_hi, target_faces):
    nv = max(1, int(round(np.sqrt(target_faces / 11.0))))
    nu = max(1, int(round(target_faces / (2.0 * nv))))
    s = np.linspace(s_lo, s_hi, nu + 1)
    v = np.linspace(-GINGIVA_HALF_WIDTH, GINGIVA_HALF_WIDTH, nv + 1)
    xy, tangent = _arch_point(a, x_curve, s_curve, s)
    normal = np.stack([-tangent[:, 1], tangent[:, 0]], axis=-1)
    ss, vv = np.meshgrid(np.arange(nu + 1), v, indexing="ij")
    pts_xy = xy[ss] + normal[ss] * vv[..., None]
    z = RIDGE_HEIGHT * (1.0 - (vv / GINGIVA_HALF_WIDTH) ** 2)
    verts = np.concatenate([pts_xy, z[..., None]], axis=-1).reshape(-1, 3)
    faces = []
    for i in range(nu):
        for j in range(nv):
            p00 = i * (nv + 1) + j
            p01, p10, p11 = p00 + 1, p00 + nv + 1, p00 + nv + 2
            faces.append((p00, p10, p11))
            faces.append((p00, p11, p01))
    faces = np.array(faces, dtype=np.int64)
    tri = verts[faces]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    flip = n[:, 2] < 0
    faces[flip] = faces[flip][:, [0, 2, 1]]
    return verts, faces


def arch_layout(jaw):
    """Arc-length center and slot width of all 16 positions, midline at s = 0."""
    cap = class_at_position(jaw)
    widths = np.array([TOOTH_WIDTH[quadrant_index(cap[p])] for p in range(16)])
    edges = np.concatenate([[0.0], np.cumsum(widths)])
    centers = 0.5 * (edges[:-1] + edges[1:]) - edges[-1] / 2.0
    return centers, widths


def generate_arch(spec):
    """Build a labeled arch mesh and its ground truth from an :class:`ArchSpec`."""
    if not isinstance(spec, ArchSpec):
        spec = ArchSpec.from_dict(spec)
    rng = np.random.default_rng(spec.seed)
    a = ARCH_CURVATURE[spec.jaw]
    x_curve, s_curve = _arch_curve(a)
    s_centers, widths = arch_layout(spec.jaw)
    pos_of = FDI_POSITION[spec.jaw]
    verts, faces, labels, inst = [], [], [], []

    g_v, g_f = _gingiva_strip(a, x_curve, s_curve, s_centers[0] - widths[0], s_centers[-1] + widths[-1],
                              spec.gingiva_faces)
    verts.append(g_v)
    faces.append(g_f)
    labels.append(np.zeros(len(g_f), dtype=np.int64))
    inst.append(np.full(len(g_f), -1, dtype=np.int64))
    offset = len(g_v)

    present = sorted(spec.teeth_present, key=lambda c: pos_of[c])
    jitter = rng.uniform(-spec.crowding_jitter, spec.crowding_jitter, size=len(present))
    for iid, (cls, jit) in enumerate(zip(present, jitter)):
        pos = pos_of[cls]
        q = quadrant_index(cls)
        s = s_centers[pos] + jit * widths[pos]
        xy, tangent = _arch_point(a, x_curve, s_curve, np.array([s]))
        t = np.array([tangent[0, 0], tangent[0, 1], 0.0])
        n = np.array([-t[1], t[0], 0.0])
        axes = np.stack([t, n, np.array([0.0, 0.0, 1.0])], axis=1)
        radii = np.array([0.5 * GAP_FRACTION * widths[pos], TOOTH_DEPTH[q], TOOTH_HEIGHT[q]])
        center = np.array([xy[0, 0], xy[0, 1], RIDGE_HEIGHT + 0.6 * TOOTH_HEIGHT[q]])
        tv, tf = uv_ellipsoid(center, axes, radii, spec.tooth_faces)
        verts.append(tv)
        faces.append(tf + offset)
        labels.append(np.full(len(tf), cls, dtype=np.int64))
        inst.append(np.full(len(tf), iid, dtype=np.int64))
        offset += len(tv)

    # float32-representable coordinates so OBJ and PLY round trips are lossless
    vertices = np.vstack(verts).astype(np.float32).astype(np.float64)
    mesh = LabeledMesh(vertices, np.vstack(faces), np.concatenate(labels), np.concatenate(inst), spec.jaw)
    return mesh, ground_truth_from_mesh(mesh, compute_geometry(mesh))


# ---------------------------------------------------------------- predictions

def perfect_prediction(gt, geom, cmap, n_queries=N_QUERIES):
    """Saturated predictions that reproduce ``gt`` in the first L queries.

    3D centers are the ground-truth class-mean centers; 2D centers are the
    pixels of the faces picked by :func:`derive_centers` on the saturated masks.
    Remaining queries have empty masks and are invalid.
    """
    L, m = gt.masks.shape
    if L > n_queries:
        raise SchemaError(f"{L} teeth exceed {n_queries} queries")
    mask_logits = np.full((n_queries, m), -LOGIT)
    mask_logits[:L] = np.where(gt.masks > 0, LOGIT, -LOGIT)
    class_logits = np.full((n_queries, N_CLASSES), -CLASS_LOGIT)
    class_logits[np.arange(L), gt.labels] = CLASS_LOGIT
    objectness = np.full(n_queries, -LOGIT)
    objectness[:L] = LOGIT
    dc = derive_centers(mask_logits, geom, cmap)
    centers3d = np.full((n_queries, 3), np.nan)
    centers3d[:L] = gt.centers3d
    return InstancePrediction(mask_logits, class_logits, objectness, centers3d, dc.centers2d, dc.valid)


def perturb(pred, spec, scene):
    """Seeded corruption of a prediction: mask sign flips, center drift and class confusion.

    A fixed set of ``round(rate * M)`` faces has its mask logits negated for every
    valid instance. Valid centers move by ``center_drift * diagonal`` in a random
    3D direction. Each ``(from, to, p)`` confusion swaps the two class logits of a
    valid instance whose top class is ``from``, with probability ``p``.
    """
    rng = np.random.default_rng(spec.seed)
    valid = pred.valid.copy()
    vidx = np.flatnonzero(valid)
    mask_logits = pred.mask_logits.copy()
    n_flip = int(round(spec.mask_flip_rate * pred.n_faces))
    if n_flip:
        faces = np.sort(rng.choice(pred.n_faces, size=n_flip, replace=False))
        mask_logits[np.ix_(vidx, faces)] *= -1.0
    centers3d = pred.centers3d.copy()
    if spec.center_drift > 0:
        d = rng.normal(size=(vidx.size, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        centers3d[vidx] += spec.center_drift * scene.diagonal * d
    class_logits = pred.class_logits.copy()
    for src, dst, p in spec.class_confusion:
        draws = rng.uniform(size=vidx.size)
        for i, u in zip(vidx, draws):
            if np.argmax(pred.class_logits[i]) == src and u < p:
                class_logits[i, [src, dst]] = class_logits[i, [dst, src]]
    return pred.replace(mask_logits=mask_logits, centers3d=centers3d, class_logits=class_logits, valid=valid)


# ---------------------------------------------------------------- 2D embeddings

def class_embedding_matrix(channels, seed=0):
    """Fixed ``(17, channels)`` class embeddings; orthonormal rows when channels >= 17."""
    rng = np.random.default_rng(seed)
    g = rng.normal(size=(channels, N_CLASSES))
    if channels >= N_CLASSES:
        q, _ = np.linalg.qr(g)
        return q.T
    return (g / np.linalg.norm(g, axis=0, keepdims=True)).T


def synth_embedding_grid(mesh, cmap, grid_size, mode="label_onehot_smoothed", channels=256, smoothing=1.0,
                         seed=0, geom=None):
    """Stand-in for frozen 2D image embeddings.

    ``label_onehot_smoothed`` splats the class of the topmost face (largest center
    z) into each grid cell, blurs the per-class histograms with a Gaussian of
    ``smoothing`` cells (0 disables it), and maps them through fixed class
    embeddings. ``random`` draws seeded uniform values.
    """
    gh, gw = (int(s) for s in grid_size)
    if gh < 2 or gw < 2:
        raise SchemaError("grid_size must be at least 2x2")
    if mode == "random":
        rng = np.random.default_rng(seed)
        return EmbeddingGrid(rng.uniform(-1.0, 1.0, size=(channels, gh, gw)))
    if mode != "label_onehot_smoothed":
        raise SchemaError(f"unknown embedding mode {mode!r}")
    geom = compute_geometry(mesh) if geom is None else geom
    h, w = cmap.image_size
    rows = np.clip(np.rint(cmap.coords[:, 0] * (gh - 1) / (h - 1)).astype(np.int64), 0, gh - 1)
    cols = np.clip(np.rint(cmap.coords[:, 1] * (gw - 1) / (w - 1)).astype(np.int64), 0, gw - 1)
    cell = rows * gw + cols
    # z-buffer: sort by height so the last write per cell is the topmost face
    order = np.lexsort((np.arange(cell.size), geom.centers[:, 2]))
    top = np.full(gh * gw, -1, dtype=np.int64)
    top[cell[order]] = order
    covered = top >= 0
    hist = np.zeros((N_CLASSES, gh * gw))
    hist[mesh.face_labels[top[covered]], np.flatnonzero(covered)] = 1.0
    hist = hist.reshape(N_CLASSES, gh, gw)
    cover = covered.reshape(gh, gw).astype(np.float64)
    if smoothing > 0:
        hist = np.stack([gaussian_filter(hc, smoothing, mode="nearest") for hc in hist])
        cover = gaussian_filter(cover, smoothing, mode="nearest")
    hist = np.divide(hist, cover, out=np.zeros_like(hist), where=cover > 1e-12)
    emb = class_embedding_matrix(channels, seed)
    return EmbeddingGrid(np.einsum("kc,khw->chw", emb, hist))


# ---------------------------------------------------------------- matching scenarios

@dataclass
class FlipCase:
    mesh: LabeledMesh
    gt: object
    scene: object
    geom: object
    cmap: object
    pred: InstancePrediction
    chain: tuple = field(default_factory=tuple)  # prediction indices whose class is shifted


FLIP_CHAIN = 5
FLIP_MASK_LOGIT = 1.0
FLIP_CLASS_LOGITS = (0.0, -3.0)  # (own class, next class) before confusion


def third_molar_flip_case(seed=0, jaw="upper", chain=FLIP_CHAIN):
    """Fifteen-tooth arch where class evidence alone pushes labels one slot along the arch.

    The left third molar is absent. Predictions for the first ``chain`` teeth,
    starting at the right third molar, get soft masks spilling onto the next
    tooth and mild class logits; a class confusion (each class to its neighbour's
    class, probability 1) then makes every one of them look like its neighbour.
    Without the order prior, the cheapest matching shifts the chain and sends
    the last chain prediction to the third molar; the order prior
    penalises that long jump and restores the identity matching.
    """
    cap = class_at_position(jaw)
    missing = 15
    present = tuple(cap[p] for p in range(16) if p != missing)
    mesh, gt = generate_arch(ArchSpec(jaw=jaw, teeth_present=present, seed=seed))
    geom = compute_geometry(mesh)
    scene = scene_frame(mesh)
    cmap = project_occlusal(mesh, geom)
    pred = perfect_prediction(gt, geom, cmap)
    order = np.argsort([FDI_POSITION[jaw][c] for c in gt.labels], kind="stable")
    mask_logits = pred.mask_logits.copy()
    class_logits = pred.class_logits.copy()
    own_logit, next_logit = FLIP_CLASS_LOGITS
    confusion = []
    for step in range(chain):
        i, nxt = order[step], order[step + 1]
        spill = (gt.masks[i] > 0) | (gt.masks[nxt] > 0)
        mask_logits[i] = np.where(spill, FLIP_MASK_LOGIT, -LOGIT)
        class_logits[i] = -CLASS_LOGIT
        class_logits[i, gt.labels[i]] = own_logit
        class_logits[i, gt.labels[nxt]] = next_logit
        confusion.append((int(gt.labels[i]), int(gt.labels[nxt]), 1.0))
    pred = pred.replace(mask_logits=mask_logits, class_logits=class_logits)
    pred = perturb(pred, PerturbSpec(class_confusion=tuple(confusion), seed=seed), scene)
    dc = derive_centers(pred.mask_logits, geom, cmap)
    centers = np.where(dc.valid[:, None], dc.centers3d, np.nan)
    pred = pred.replace(centers3d=centers, centers2d=dc.centers2d, valid=dc.valid)
    return FlipCase(mesh, gt, scene, geom, cmap, pred, tuple(int(i) for i in order[:chain]))
