"""Configuration, on-disk artifacts and the end-to-end run.

Stage order: mesh -> geometry -> features -> encode -> project -> sample ->
guidance -> fuse -> decode -> derive centers -> match -> losses -> metrics.
Guidance needs instance centers before fusion, so a first decode on the
unfused features supplies them; the fused features are then decoded again.
"""

import contextlib
import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .cmr import InstancePrediction, predict_instances
from .encoder import DEFAULT_K, build_input_features, encode_features
from .exceptions import SchemaError, ShapeError, ToothMatchError
from .fhm import GroundTruth, MatchConfig, fhm_match
from .losses import compute_losses
from .mesh import compute_geometry, load_mesh, scene_frame
from .metrics import center_error, evaluate_labels, labels_from_prediction
from .model import ModelWeights
from .prg import fuse
from .projection import (DEFAULT_EMBED_CHANNELS, EmbeddingGrid, bilinear_sample, default_sigma, guidance_map,
                         project_occlusal, rescale_coords)
from .synth import perfect_prediction, synth_embedding_grid
from .tensorio import read_tensor, write_tensor

log = logging.getLogger("toothmatch")

STAGES = ("load", "geometry", "features", "encode", "project", "sample", "guidance", "fuse", "decode",
          "match", "losses", "metrics")
EMBEDDING_MODES = ("random", "label_onehot_smoothed")


@dataclass(frozen=True)
class PipelineConfig:
    mesh: str = None
    sidecar: str = None
    gt: str = None
    weights: str = None
    embedding: str = None
    prediction: str = None
    output: str = "out"
    scan_dir: str = None
    image_size: tuple = (1024, 1024)
    grid_size: tuple = (64, 64)
    embed_channels: int = DEFAULT_EMBED_CHANNELS
    embedding_mode: str = "random"
    k: int = DEFAULT_K
    threshold: float = 0.5
    sigma: float = None
    tau: float = 1.0
    seed: int = 0
    skip_fusion: bool = False
    match: MatchConfig = field(default_factory=MatchConfig)

    def __post_init__(self):
        for name in ("image_size", "grid_size"):
            v = getattr(self, name)
            if not (isinstance(v, (list, tuple)) and len(v) == 2 and all(isinstance(s, int) and s >= 2 for s in v)):
                raise SchemaError(f"{name}: must be two integers >= 2")
            object.__setattr__(self, name, tuple(v))
        if not (isinstance(self.k, int) and self.k >= 1):
            raise SchemaError("k: must be a positive integer")
        if not 0 < self.threshold < 1:
            raise SchemaError("threshold: must lie in (0, 1)")
        if self.sigma is not None and not self.sigma > 0:
            raise SchemaError("sigma: must be positive")
        if self.embedding_mode not in EMBEDDING_MODES:
            raise SchemaError(f"embedding_mode: must be one of {EMBEDDING_MODES}")
        if not (isinstance(self.embed_channels, int) and self.embed_channels >= 1):
            raise SchemaError("embed_channels: must be a positive integer")
        if isinstance(self.match, dict):
            object.__setattr__(self, "match", _match_config(self.match))

    @classmethod
    def from_dict(cls, doc, base_dir="."):
        if not isinstance(doc, dict):
            raise SchemaError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        for key in doc:
            if key not in known:
                raise SchemaError(f"{key}: unknown config field")
        kw = dict(doc)
        for key in ("mesh", "sidecar", "gt", "weights", "embedding", "prediction", "output", "scan_dir"):
            if kw.get(key) is not None:
                if not isinstance(kw[key], str):
                    raise SchemaError(f"{key}: must be a path string")
                kw[key] = os.path.normpath(os.path.join(base_dir, kw[key]))
        for key in ("k", "seed", "embed_channels"):
            if key in kw and (not isinstance(kw[key], int) or isinstance(kw[key], bool)):
                raise SchemaError(f"{key}: must be an integer")
        for key in ("threshold", "sigma", "tau"):
            if kw.get(key) is not None and (not isinstance(kw[key], (int, float)) or isinstance(kw[key], bool)):
                raise SchemaError(f"{key}: must be a number")
        if "skip_fusion" in kw and not isinstance(kw["skip_fusion"], bool):
            raise SchemaError("skip_fusion: must be true or false")
        if "match" in kw:
            kw["match"] = _match_config(kw["match"])
        return cls(**kw)

    @classmethod
    def from_file(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(doc, os.path.dirname(os.path.abspath(path)))

    def as_dict(self):
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        d["grid_size"] = list(self.grid_size)
        return d

    def digest(self):
        """sha256 of the canonical JSON form; paths enter by basename so reports do not depend on the checkout."""
        d = self.as_dict()
        for key in ("mesh", "sidecar", "gt", "weights", "embedding", "prediction", "output", "scan_dir"):
            if d[key] is not None:
                d[key] = os.path.basename(d[key])
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()

    def with_overrides(self, **kw):
        match_kw = {k: kw.pop(k) for k in ("lambda_ord", "lambda_cent") if kw.get(k) is not None}
        kw = {k: v for k, v in kw.items() if v is not None}
        cfg = replace(self, **kw)
        if match_kw:
            cfg = replace(cfg, match=replace(cfg.match, **match_kw))
        return cfg


def _match_config(doc):
    if isinstance(doc, MatchConfig):
        return doc
    if not isinstance(doc, dict):
        raise SchemaError("match: must be an object")
    known = {f.name for f in fields(MatchConfig)}
    for key, v in doc.items():
        if key not in known:
            raise SchemaError(f"match.{key}: unknown field")
        if not isinstance(v, (int, float)) or isinstance(v, bool):
            raise SchemaError(f"match.{key}: must be a number")
    return MatchConfig(**{k: float(v) for k, v in doc.items()})


def require(path, what):
    if path is None:
        raise SchemaError(f"{what}: missing from config")
    if not os.path.exists(path):
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


# ---------------------------------------------------------------- artifacts

def save_ground_truth(path, gt, n_faces):
    doc = {"jaw": gt.jaw, "n_faces": int(n_faces), "labels": gt.labels.tolist(),
           "instance_ids": gt.instance_ids.tolist(), "centers3d": gt.centers3d.tolist()}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_ground_truth(path, mesh):
    """Ground truth from its JSON file; masks come from the mesh's instance ids."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: invalid JSON ({exc})") from exc
    for key in ("jaw", "labels", "instance_ids", "centers3d"):
        if key not in doc:
            raise SchemaError(f"{path}: missing field {key!r}")
    if doc.get("n_faces", mesh.n_faces) != mesh.n_faces:
        raise ShapeError(f"{path}: ground truth covers {doc['n_faces']} faces, mesh has {mesh.n_faces}")
    ids = np.asarray(doc["instance_ids"], dtype=np.int64)
    masks = mesh.face_instance_ids[None, :] == ids[:, None]
    return GroundTruth(masks, doc["labels"], doc["centers3d"], jaw=doc["jaw"], instance_ids=ids)


def _nan_list(a):
    return [[None if not np.isfinite(x) else float(x) for x in row] for row in np.asarray(a)]


def save_prediction(directory, pred):
    os.makedirs(directory, exist_ok=True)
    write_tensor(os.path.join(directory, "mask_logits.tensor"), pred.mask_logits, dtype="f64")
    doc = {"n_instances": pred.n_instances, "n_faces": pred.n_faces,
           "class_logits": pred.class_logits.tolist(), "objectness": pred.objectness.tolist(),
           "centers3d": _nan_list(pred.centers3d), "centers2d": _nan_list(pred.centers2d),
           "valid": pred.valid.tolist()}
    with open(os.path.join(directory, "prediction.json"), "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_prediction(directory):
    path = os.path.join(directory, "prediction.json")
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: invalid JSON ({exc})") from exc
    try:
        ml = read_tensor(os.path.join(directory, "mask_logits.tensor"))

        def arr(key):
            return np.array([[np.nan if x is None else x for x in row] for row in doc[key]], dtype=np.float64)

        return InstancePrediction(ml, doc["class_logits"], doc["objectness"], arr("centers3d"), arr("centers2d"),
                                  doc["valid"])
    except KeyError as exc:
        raise SchemaError(f"{path}: missing field {exc.args[0]!r}") from None


# ---------------------------------------------------------------- stages

@contextlib.contextmanager
def stage(name, timings):
    """Time a stage and prefix its errors with the stage name."""
    t0 = time.perf_counter()
    try:
        yield
    except ToothMatchError as exc:
        raise type(exc)(f"[{name}] {exc}") from exc
    finally:
        timings[name] = timings.get(name, 0.0) + time.perf_counter() - t0


@dataclass
class Scan:
    mesh: object
    geom: object
    scene: object
    gt: GroundTruth = None


def load_scan(mesh_path, sidecar_path, gt_path=None, timings=None):
    timings = {} if timings is None else timings
    with stage("load", timings):
        mesh = load_mesh(require(mesh_path, "mesh"), require(sidecar_path, "sidecar"))
        gt = load_ground_truth(require(gt_path, "gt"), mesh) if gt_path is not None else None
    with stage("geometry", timings):
        geom = compute_geometry(mesh)
        scene = scene_frame(mesh)
    return Scan(mesh, geom, scene, gt)


def load_weights(cfg):
    if cfg.weights is not None:
        return ModelWeights.load(require(cfg.weights, "weights"))
    return ModelWeights.seeded(cfg.seed, embed_channels=cfg.embed_channels, tau=cfg.tau)


def embedding_grid(cfg, scan, cmap):
    if cfg.embedding is not None:
        values = read_tensor(require(cfg.embedding, "embedding"))
        grid = EmbeddingGrid(values)
        if grid.channels != cfg.embed_channels:
            raise ShapeError(f"embedding grid has {grid.channels} channels, config says {cfg.embed_channels}")
        return grid
    return synth_embedding_grid(scan.mesh, cmap, cfg.grid_size, mode=cfg.embedding_mode,
                                channels=cfg.embed_channels, seed=cfg.seed, geom=scan.geom)


def run_features(scan, weights, cfg, timings):
    with stage("features", timings):
        p24 = build_input_features(scan.mesh, scan.geom)
    with stage("encode", timings):
        f3d = encode_features(p24.values, weights.encoder, k=cfg.k)
    return p24, f3d


def run_projection(scan, cfg, timings):
    with stage("project", timings):
        cmap = project_occlusal(scan.mesh, scan.geom, cfg.image_size)
    with stage("sample", timings):
        grid = embedding_grid(cfg, scan, cmap)
        ep = bilinear_sample(grid, rescale_coords(cmap, grid.grid_size))
    return cmap, ep


def run_fusion(f3d, ep, scan, cmap, weights, cfg, timings):
    """Returns ``(fused features, guidance weights)``; the guidance comes from a decode of ``f3d``."""
    with stage("guidance", timings):
        first = predict_instances(f3d, scan.geom, cmap, weights.decoder, cfg.threshold)
        sigma = cfg.sigma if cfg.sigma is not None else default_sigma(cmap.image_size)
        mp = guidance_map(first.centers2d[first.valid], cmap, sigma)
    with stage("fuse", timings):
        fused = fuse(f3d, ep, mp, weights.gating)
    return fused, mp


def run_decode(f, scan, cmap, weights, cfg, timings):
    with stage("decode", timings):
        return predict_instances(f, scan.geom, cmap, weights.decoder, cfg.threshold)


def assignment_doc(assignment, trail, dump_similarity=False):
    doc = {"pairs": [[int(p), int(l)] for p, l in assignment.pairs], "total_cost": assignment.total_cost}
    if dump_similarity:
        def mat(a):
            return [[None if not np.isfinite(x) else float(x) for x in row] for row in np.asarray(a)]
        doc["trail"] = {
            "s_mask": mat(trail.s_mask), "s_cls": mat(trail.s_cls), "base": mat(trail.base.values),
            "center_refined": mat(trail.center_refined.values), "order_refined": mat(trail.order_refined.values),
            "ranks": [None if not np.isfinite(x) else float(x) for x in trail.ranks],
            "ordinals": trail.ordinals.tolist(), "cost": mat(trail.cost),
            "valid_rows": trail.extras["valid_rows"].tolist(),
        }
    return doc


def score(scan, pred, cmap, assignment, threshold=0.5, scan_id="", timings=None):
    """Losses and metrics for a matched prediction, as a MetricReport."""
    timings = {} if timings is None else timings
    with stage("losses", timings):
        losses = compute_losses(pred, scan.gt, assignment, cmap, scan.mesh.face_labels, threshold)
    with stage("metrics", timings):
        labels = labels_from_prediction(pred, threshold)
        report = evaluate_labels(labels, scan.mesh.face_labels, scan.mesh.face_instance_ids, scan_id=scan_id)
        pi = [p for p, _ in assignment.pairs]
        li = [l for _, l in assignment.pairs]
        report.center_error = center_error(pred.centers3d[pi], scan.gt.centers3d[li], scan.scene)
        report.losses = losses.as_dict()
    return report


def evaluate_prediction(scan, pred, cmap, match_cfg, threshold=0.5, scan_id=""):
    """Match, then score: returns ``(MetricReport, Assignment, MatchTrail)``."""
    if pred.n_faces != scan.mesh.n_faces:
        raise ShapeError(f"prediction covers {pred.n_faces} faces, mesh has {scan.mesh.n_faces}")
    assignment, trail = fhm_match(pred, scan.gt, scan.scene, match_cfg)
    return score(scan, pred, cmap, assignment, threshold, scan_id), assignment, trail


def perfect_for(scan, cmap):
    return perfect_prediction(scan.gt, scan.geom, cmap)


def run_pipeline(cfg, perfect=False, dump_similarity=False):
    """One deterministic end-to-end run. Returns ``(report dict, timings)``; timings stay out of the report."""
    timings = {}
    if cfg.gt is None:
        raise SchemaError("gt: the pipeline needs ground truth for matching and metrics")
    scan = load_scan(cfg.mesh, cfg.sidecar, cfg.gt, timings)
    with stage("load", timings):
        weights = load_weights(cfg)
    p24, f3d = run_features(scan, weights, cfg, timings)
    cmap, ep = run_projection(scan, cfg, timings)
    if cfg.skip_fusion:
        fused = f3d
        mp = np.zeros(scan.mesh.n_faces)
    else:
        fused, mp = run_fusion(f3d, ep, scan, cmap, weights, cfg, timings)
    pred = perfect_for(scan, cmap) if perfect else run_decode(fused, scan, cmap, weights, cfg, timings)
    with stage("match", timings):
        assignment, trail = fhm_match(pred, scan.gt, scan.scene, cfg.match)
    report = score(scan, pred, cmap, assignment, cfg.threshold, os.path.basename(cfg.mesh), timings)
    out = {
        "config_sha256": cfg.digest(),
        "flags": {"skip_fusion": cfg.skip_fusion, "perfect": perfect, "miou_aggregation": "macro"},
        "stages": list(STAGES),
        "n_faces": scan.mesh.n_faces,
        "n_teeth": scan.gt.n_teeth,
        "n_valid_predictions": int(pred.valid.sum()),
        "guidance_mean": float(mp.mean()),
        "assignment": assignment_doc(assignment, trail, dump_similarity),
        "report": report.as_dict(),
    }
    return out, timings


def write_json(path, doc):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")

