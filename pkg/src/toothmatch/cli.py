"""Batch command-line front end.

Exit codes: 0 success, 1 I/O, 2 schema or shape error, 3 degenerate input.
``TOOTHMATCH_LOG`` sets the log level (default WARNING).
"""

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import pipeline as pl
from .exceptions import SchemaError, ShapeError, ToothMatchError
from .fhm import fhm_match, ground_truth_from_mesh
from .mesh import compute_geometry, load_mesh, save_mesh
from .metrics import aggregate_reports
from .projection import project_occlusal
from .synth import ArchSpec, generate_arch
from .tensorio import read_tensor, write_tensor

log = logging.getLogger("toothmatch")

MESH_NAMES = ("scan.obj", "scan.ply")


def _load_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: invalid JSON ({exc})") from exc


def _config(args):
    if args.config is None:
        raise SchemaError("--config: required for this command")
    cfg = pl.PipelineConfig.from_file(args.config)
    return cfg.with_overrides(seed=args.seed, lambda_ord=args.lambda_ord, lambda_cent=args.lambda_cent,
                              skip_fusion=True if args.skip_fusion else None)


def _out(cfg, name):
    os.makedirs(cfg.output, exist_ok=True)
    return os.path.join(cfg.output, name)


def _prediction_dir(cfg):
    return cfg.prediction or os.path.join(cfg.output, "prediction")


# ---------------------------------------------------------------- commands

def cmd_synth(args):
    if args.spec is None:
        raise SchemaError("synth: a spec JSON path is required")
    doc = _load_json(args.spec)
    if args.seed is not None:
        if not isinstance(doc, dict):
            raise SchemaError("arch spec must be a JSON object")
        doc = {**doc, "seed": args.seed}
    spec = ArchSpec.from_dict(doc)
    mesh, _ = generate_arch(spec)
    os.makedirs(args.out, exist_ok=True)
    mesh_path = os.path.join(args.out, "scan." + args.format)
    sidecar = os.path.join(args.out, "scan.json")
    save_mesh(mesh, mesh_path, sidecar)
    # ground truth is computed from the reloaded mesh so the bundle matches what readers see
    mesh = load_mesh(mesh_path, sidecar)
    gt = ground_truth_from_mesh(mesh, compute_geometry(mesh))
    pl.save_ground_truth(os.path.join(args.out, "gt.json"), gt, mesh.n_faces)
    print(f"synth: M={mesh.n_faces} L={gt.n_teeth} seed={spec.seed} -> {args.out}")
    return 0


def cmd_features(args):
    cfg = _config(args)
    scan = pl.load_scan(cfg.mesh, cfg.sidecar)
    weights = pl.load_weights(cfg)
    timings = {}
    p24, f3d = pl.run_features(scan, weights, cfg, timings)
    write_tensor(_out(cfg, "input24.tensor"), p24.values, dtype="f64")
    write_tensor(_out(cfg, "f3d.tensor"), f3d.values, dtype="f64")
    print(f"features: M={scan.mesh.n_faces} k={cfg.k} -> {cfg.output}")
    return 0


def cmd_project(args):
    cfg = _config(args)
    scan = pl.load_scan(cfg.mesh, cfg.sidecar)
    cmap, ep = pl.run_projection(scan, cfg, {})
    write_tensor(_out(cfg, "coords.tensor"), cmap.coords, dtype="f64")
    write_tensor(_out(cfg, "ep.tensor"), ep, dtype="f64")
    print(f"project: image={cfg.image_size} grid={cfg.grid_size} C_e={ep.shape[0]} -> {cfg.output}")
    return 0


def _read_stage(cfg, name):
    path = os.path.join(cfg.output, name)
    if not os.path.exists(path):
        raise FileNotFoundError(f"missing stage artifact {path}; run the earlier stage first")
    return read_tensor(path)


def cmd_fuse(args):
    cfg = _config(args)
    scan = pl.load_scan(cfg.mesh, cfg.sidecar)
    f3d = _read_stage(cfg, "f3d.tensor")
    if cfg.skip_fusion:
        fused, mp = f3d, np.zeros(scan.mesh.n_faces)
    else:
        weights = pl.load_weights(cfg)
        ep = _read_stage(cfg, "ep.tensor")
        cmap = project_occlusal(scan.mesh, scan.geom, cfg.image_size)
        fused, mp = pl.run_fusion(f3d, ep, scan, cmap, weights, cfg, {})
        fused = fused.values
    write_tensor(_out(cfg, "guidance.tensor"), mp, dtype="f64")
    write_tensor(_out(cfg, "fused.tensor"), fused, dtype="f64")
    print(f"fuse: skip_fusion={cfg.skip_fusion} mean guidance={float(np.mean(mp)):.4f} -> {cfg.output}")
    return 0


def cmd_infer(args):
    cfg = _config(args)
    scan = pl.load_scan(cfg.mesh, cfg.sidecar, cfg.gt if args.perfect else None)
    cmap = project_occlusal(scan.mesh, scan.geom, cfg.image_size)
    if args.perfect:
        if scan.gt is None:
            raise SchemaError("gt: --perfect needs ground truth")
        pred = pl.perfect_for(scan, cmap)
    else:
        f = _read_stage(cfg, "f3d.tensor" if cfg.skip_fusion else "fused.tensor")
        pred = pl.run_decode(f, scan, cmap, pl.load_weights(cfg), cfg, {})
    pl.save_prediction(_prediction_dir(cfg), pred)
    print(f"infer: N={pred.n_instances} valid={int(pred.valid.sum())} -> {_prediction_dir(cfg)}")
    return 0


def _prediction_for(cfg, scan, cmap, perfect):
    if perfect:
        return pl.perfect_for(scan, cmap)
    pred = pl.load_prediction(pl.require(_prediction_dir(cfg), "prediction"))
    if pred.n_faces != scan.mesh.n_faces:
        raise ShapeError(f"prediction covers {pred.n_faces} faces, mesh has {scan.mesh.n_faces}")
    return pred


def cmd_match(args):
    cfg = _config(args)
    scan = pl.load_scan(cfg.mesh, cfg.sidecar, pl.require(cfg.gt, "gt"))
    cmap = project_occlusal(scan.mesh, scan.geom, cfg.image_size)
    pred = _prediction_for(cfg, scan, cmap, args.perfect)
    assignment, trail = fhm_match(pred, scan.gt, scan.scene, cfg.match)
    doc = {"config_sha256": cfg.digest(), "lambda_ord": cfg.match.lambda_ord, "lambda_cent": cfg.match.lambda_cent,
           "gt_labels": scan.gt.labels.tolist(),
           "predicted_classes": [int(np.argmax(pred.class_logits[p])) for p, _ in assignment.pairs],
           **pl.assignment_doc(assignment, trail, args.dump_similarity)}
    pl.write_json(_out(cfg, "assignment.json"), doc)
    log.info("assignment (lambda_ord=%s): %s", cfg.match.lambda_ord, assignment.pairs)
    print(f"match: {len(assignment)} pairs, cost {assignment.total_cost:.6f} -> {_out(cfg, 'assignment.json')}")
    return 0


def _scan_paths(directory):
    mesh = next((os.path.join(directory, n) for n in MESH_NAMES if os.path.exists(os.path.join(directory, n))), None)
    if mesh is None:
        raise FileNotFoundError(f"{directory}: no scan.obj or scan.ply")
    return mesh, os.path.join(directory, "scan.json"), os.path.join(directory, "gt.json")


def _eval_one(task):
    mesh_path, sidecar, gt_path, pred_dir, cfg, perfect, scan_id = task
    scan = pl.load_scan(mesh_path, sidecar, gt_path)
    cmap = project_occlusal(scan.mesh, scan.geom, cfg.image_size)
    if perfect:
        pred = pl.perfect_for(scan, cmap)
    else:
        pred = pl.load_prediction(pl.require(pred_dir, "prediction"))
    report, _, _ = pl.evaluate_prediction(scan, pred, cmap, cfg.match, cfg.threshold, scan_id)
    return report


def cmd_eval(args):
    cfg = _config(args)
    if cfg.scan_dir is not None:
        root = pl.require(cfg.scan_dir, "scan_dir")
        names = sorted(d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d)))
        if not names:
            raise FileNotFoundError(f"{root}: no scan directories")
        tasks = []
        for name in names:
            m, s, g = _scan_paths(os.path.join(root, name))
            tasks.append((m, s, g, os.path.join(root, name, "prediction"), cfg, args.perfect, name))
    else:
        tasks = [(cfg.mesh, cfg.sidecar, pl.require(cfg.gt, "gt"), _prediction_dir(cfg), cfg, args.perfect,
                  os.path.basename(cfg.mesh or ""))]
    jobs = max(1, args.jobs or 1)
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            reports = list(pool.map(_eval_one, tasks))
    else:
        reports = [_eval_one(t) for t in tasks]
    doc = {"config_sha256": cfg.digest(), "flags": {"perfect": bool(args.perfect), "miou_aggregation": "macro"},
           "scans": [r.as_dict() for r in reports], "aggregate": aggregate_reports(reports)}
    pl.write_json(_out(cfg, "report.json"), doc)
    agg = doc["aggregate"]
    print(f"eval: {len(reports)} scan(s) oa={agg['oa']:.4f} miou={agg['miou']:.4f} -> {_out(cfg, 'report.json')}")
    return 0


def cmd_pipeline(args):
    cfg = _config(args)
    report, timings = pl.run_pipeline(cfg, perfect=args.perfect, dump_similarity=args.dump_similarity)
    pl.write_json(_out(cfg, "report.json"), report)
    for name, t in timings.items():
        print(f"  {name:<9s} {t:8.3f} s", file=sys.stderr)
    r = report["report"]
    print(f"pipeline: oa={r['oa']:.4f} miou={r['miou']:.4f} valid={report['n_valid_predictions']} "
          f"-> {_out(cfg, 'report.json')}")
    return 0


COMMANDS = {"synth": cmd_synth, "features": cmd_features, "project": cmd_project, "fuse": cmd_fuse,
            "infer": cmd_infer, "match": cmd_match, "eval": cmd_eval, "pipeline": cmd_pipeline}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline config JSON (paths resolve relative to it)")
    common.add_argument("--seed", type=int, help="override the config / spec seed")
    common.add_argument("--jobs", type=int, default=1, help="parallel workers across scans")
    common.add_argument("--dump-similarity", action="store_true", help="include the full similarity trail")
    common.add_argument("--perfect", action="store_true", help="use saturated predictions built from ground truth")
    common.add_argument("--skip-fusion", action="store_true", help="use unfused 3D features (ablation)")
    common.add_argument("--lambda-ord", type=float, help="override the order-penalty weight")
    common.add_argument("--lambda-cent", type=float, help="override the center-penalty weight")

    parser = argparse.ArgumentParser(prog="toothmatch", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    synth = sub.add_parser("synth", parents=[common], help="generate a synthetic arch")
    synth.add_argument("spec", nargs="?", help="ArchSpec JSON")
    synth.add_argument("--out", default="synth_out", help="output directory")
    synth.add_argument("--format", choices=("obj", "ply"), default="obj")
    for name, text in (("features", "build input descriptors and encode"), ("project", "project and sample 2D"),
                       ("fuse", "gated fusion"), ("infer", "decode instances"), ("match", "order-aware matching"),
                       ("eval", "metrics and losses"), ("pipeline", "end-to-end run")):
        sub.add_parser(name, parents=[common], help=text)
    return parser


def main(argv=None):
    level = getattr(logging, os.environ.get("TOOTHMATCH_LOG", "WARNING").upper(), logging.WARNING)
    logging.basicConfig(format="%(levelname)s %(name)s: %(message)s")
    log.setLevel(level)
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ToothMatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
