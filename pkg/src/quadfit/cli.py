"""Single command line entry point.

Subcommands cover the full toy pipeline: make-toy, sample, rasterize,
filter, fit, eval, aggregate. Global behavior:

  --seed      drives every random draw; reruns are byte-identical
  --threads   parallelism for batch fitting
  --config    JSON file of defaults per subcommand, overridden by flags
  QUADFIT_LOG log level (default INFO)

Exit codes: 0 success, 1 validation failure (bad content or arguments),
2 I/O failure (missing or unreadable files).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .camera import DEFAULT_FOCAL, DEFAULT_IMAGE_SIZE, project
from .dataset import DatasetSource, DEFAULT_BATCH_SIZE, aggregate, sample_batch, split
from .errors import ParseError, ValidationError
from .fitter import FitConfig, FitFailure, Observation, batch_fit
from .imgio import load_mask_png, save_mask_png, save_pfm, save_rgb_png, load_rgb_png
from .losses import DEFAULT_WEIGHTS, load_prior, make_toy_prior, save_prior
from .metrics import VALIDATION_RATIO, MetricsAccumulator, PckSpec
from .model import Params, export_obj, load_template, pose_mesh, save_template
from .pipeline import (IOU_ACCEPT, IOU_UNCERTAIN, AnnotationRecord, SceneSample,
                       composite_background, cycle_consistency, emit_annotation,
                       iou_bucket, load_pose_library, load_record,
                       sample_scenes, save_pose_library)
from .raster import rasterize
from .toy import make_toy_pose_library, make_toy_template

log = logging.getLogger("quadfit")

_DEFAULTS_LINE = (
    "defaults: loss_weights(kp3d={w.kp3d:g}, kp2d={w.kp2d:g}, prior={w.prior:g}, "
    "adv={w.adv:g}, supcon={w.supcon:g}) kp3d_inner(beta={w.kp3d_beta:g}, "
    "theta={w.kp3d_theta:g}) prior_beta={w.prior_beta:g} focal={f:g} "
    "image={iw}x{ih} val_ratio={r:g} batch={b} iou(accept={ia:g}, uncertain={iu:g})"
).format(w=DEFAULT_WEIGHTS, f=DEFAULT_FOCAL, iw=DEFAULT_IMAGE_SIZE[0],
         ih=DEFAULT_IMAGE_SIZE[1], r=VALIDATION_RATIO, b=DEFAULT_BATCH_SIZE,
         ia=IOU_ACCEPT, iu=IOU_UNCERTAIN)


def _setup_logging() -> None:
    level = os.environ.get("QUADFIT_LOG", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")


def _scan_config(argv: list[str]) -> dict:
    path = None
    for i, a in enumerate(argv):
        if a == "--config" and i + 1 < len(argv):
            path = argv[i + 1]
        elif a.startswith("--config="):
            path = a.split("=", 1)[1]
    if path is None:
        return {}
    with open(path) as f:
        cfg = json.load(f)
    if not isinstance(cfg, dict):
        raise ValidationError("config file must be a JSON object keyed by subcommand")
    return cfg


def _apply_config(sub: argparse.ArgumentParser, name: str, cfg: dict) -> None:
    section = cfg.get(name, {})
    if not isinstance(section, dict):
        raise ValidationError(f"config section {name!r} must be an object")
    allowed = {a.dest for a in sub._actions}
    defaults = {}
    for key, value in section.items():
        dest = key.replace("-", "_")
        if dest not in allowed:
            raise ValidationError(f"config section {name!r}: unknown option {key!r}")
        defaults[dest] = value
    sub.set_defaults(**defaults)


def _write_jsonl(path, rows) -> None:
    with open(path, "w") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")


def _read_jsonl(path) -> list[dict]:
    rows = []
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise ParseError(f"{path}:{ln}: bad JSONL line: {e}") from e
    return rows


def _stem(record_path: str) -> str:
    return Path(record_path).stem


# ---------------------------------------------------------------------------
# subcommands

def cmd_make_toy(args) -> int:
    template = make_toy_template(n_joints=args.n_joints, n_beta=args.n_beta,
                                 v_count=args.v_count, n_kp=args.n_kp, seed=args.seed)
    save_template(template, args.out)
    log.info("template: %d joints, %d vertices, %d faces, %d keypoints -> %s",
             template.n_joints, template.v_count, template.f_count,
             template.n_kp, args.out)
    if args.pose_library:
        lib = make_toy_pose_library(args.n_joints, args.poses, args.seed)
        save_pose_library(lib, args.pose_library)
        log.info("pose library: %d poses -> %s", len(lib), args.pose_library)
    if args.prior:
        save_prior(make_toy_prior(args.n_beta, args.n_joints), args.prior)
        log.info("prior -> %s", args.prior)
    if args.obj:
        mesh = pose_mesh(template, Params.zeros(template))
        export_obj(mesh.vertices, template.faces, args.obj)
        log.info("rest mesh -> %s", args.obj)
    return 0


def cmd_sample(args) -> int:
    template = load_template(args.template)
    prior = load_prior(args.prior)
    lib = load_pose_library(args.pose_library)
    if lib.shape[1] != template.n_joints:
        raise ValidationError(
            f"pose library has {lib.shape[1]} joints, template has {template.n_joints}")
    if prior.n_beta != template.n_beta or prior.n_joints != template.n_joints:
        raise ValidationError("prior dimensions do not match the template")
    scenes = sample_scenes(prior, lib, args.count, args.seed,
                           image_size=(args.image_size, args.image_size))
    _write_jsonl(args.out, (s.to_dict() for s in scenes))
    log.info("%d scenes -> %s", len(scenes), args.out)
    return 0


def cmd_rasterize(args) -> int:
    template = load_template(args.template)
    scenes = [SceneSample.from_dict(d) for d in _read_jsonl(args.scenes)]
    out = Path(args.out_dir)
    for sub in ("masks", "depth", "annotations", "images"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    backgrounds = sorted(Path(args.backgrounds).glob("*.png")) if args.backgrounds else []

    manifest = []
    failures = []
    for i, scene in enumerate(scenes):
        stem = f"{i:06d}"
        try:
            mesh = pose_mesh(template, scene.params)
            cond = rasterize(mesh.vertices, template.faces, scene.camera)
            record = emit_annotation(template, scene, cond,
                                     image_path=f"images/{stem}.png",
                                     source=args.source_id)
            save_mask_png(cond.mask, out / "masks" / f"{stem}.png")
            save_pfm(cond.depth, out / "depth" / f"{stem}.pfm")
            h, w = cond.mask.shape
            fg = np.full((h, w, 3), 200, dtype=np.uint8)
            if backgrounds:
                bg = load_rgb_png(backgrounds[i % len(backgrounds)])
                if bg.shape[:2] != (h, w):
                    raise ValidationError(
                        f"background size {bg.shape[:2]} != render size {(h, w)}")
            else:
                bg = np.zeros((h, w, 3), dtype=np.uint8)
            save_rgb_png(composite_background(fg, cond.mask, bg).astype(np.uint8),
                         out / "images" / f"{stem}.png")
            rec_path = out / "annotations" / f"{stem}.json"
            with open(rec_path, "w") as f:
                json.dump(record.to_dict(), f, sort_keys=True)
            manifest.append({"record": f"annotations/{stem}.json",
                             "source": args.source_id})
        except (ValidationError, ValueError) as e:
            failures.append((i, str(e)))
            log.error("scene %d failed: %s", i, e)
    _write_jsonl(out / "manifest.jsonl", manifest)
    log.info("%d/%d scenes rendered -> %s", len(manifest), len(scenes), out)
    return 1 if failures else 0


def cmd_filter(args) -> int:
    rows = _read_jsonl(args.manifest)
    base = Path(args.manifest).parent
    buckets = {"accepted": [], "uncertain": [], "rejected": []}
    failures = []
    for row in rows:
        stem = _stem(row["record"])
        try:
            mask_a = load_mask_png(base / "masks" / f"{stem}.png")
            mask_b = load_mask_png(Path(args.candidate_masks) / f"{stem}.png")
            iou, _ = cycle_consistency(mask_a, mask_b)
            buckets[iou_bucket(iou)].append({**row, "iou": iou})
        except (OSError, ValueError) as e:
            failures.append((stem, str(e)))
            log.error("record %s failed: %s", stem, e)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, rows_ in buckets.items():
        _write_jsonl(out / f"{name}.jsonl", rows_)
    print("filter: accepted={} uncertain={} rejected={}".format(
        *(len(buckets[k]) for k in ("accepted", "uncertain", "rejected"))))
    return 1 if failures else 0


def _fit_result_row(index: int, res) -> dict:
    if isinstance(res, FitFailure):
        return {"index": index, "error": res.error}
    return {
        "index": index,
        "beta": res.params.beta.tolist(),
        "theta": res.params.theta.tolist(),
        "gamma": res.params.gamma.tolist(),
        "cam_t": res.cam_t.tolist(),
        "objective": res.objective,
        "converged": res.converged,
        "iterations": list(res.iterations),
        "restart": res.restart,
        "report": {
            "total": res.report.total, "kp3d": res.report.kp3d,
            "kp2d": res.report.kp2d, "prior": res.report.prior,
        },
    }


def cmd_fit(args) -> int:
    template = load_template(args.template)
    prior = load_prior(args.prior)
    rows = _read_jsonl(args.annotations)
    base = Path(args.annotations).parent
    records = [load_record(base / row["record"]) for row in rows]
    observations = [Observation.from_record(r, use_3d=args.use_3d) for r in records]
    results = batch_fit(template, observations, prior, FitConfig(),
                        threads=args.threads)
    _write_jsonl(args.out, (_fit_result_row(i, r) for i, r in enumerate(results)))
    failures = [r for r in results if isinstance(r, FitFailure)]
    log.info("%d/%d fits succeeded -> %s",
             len(results) - len(failures), len(results), args.out)
    return 1 if failures else 0


def _parse_pck_spec(text: str) -> PckSpec:
    parts = text.split(":")
    try:
        if parts[0] == "hth":
            return PckSpec(mode="hth", fraction=float(parts[1]) if len(parts) > 1 else 0.5)
        if parts[0] in ("frac", "fraction"):
            return PckSpec(mode="fraction", fraction=float(parts[1]))
    except (ValueError, IndexError) as e:
        raise ValidationError(f"bad PCK spec {text!r}: {e}") from e
    raise ValidationError(f"bad PCK spec {text!r} (use hth:F or frac:F)")


def cmd_eval(args) -> int:
    template = load_template(args.template)
    fit_rows = {row.get("index", i): row
                for i, row in enumerate(_read_jsonl(args.fits))}
    ann_rows = _read_jsonl(args.annotations)
    base = Path(args.annotations).parent
    specs = tuple(_parse_pck_spec(s) for s in args.pck) or (PckSpec(),)
    acc = MetricsAccumulator(pck_specs=specs)
    csv_rows = []
    n_failed = 0
    for i, row in enumerate(ann_rows):
        fit_row = fit_rows.get(i)
        if fit_row is None or "error" in fit_row:
            n_failed += 1
            continue
        record = load_record(base / row["record"])
        pred_params = Params(np.asarray(fit_row["beta"]), np.asarray(fit_row["theta"]),
                             np.asarray(fit_row["gamma"]))
        pred = pose_mesh(template, pred_params)
        cam = replace(record.camera,
                      translation=np.asarray(fit_row["cam_t"], dtype=np.float64))
        pred2d, _, _ = project(pred.keypoints3d, cam)
        gt_vertices = None
        if record.beta is not None and record.theta is not None:
            gt_mesh = pose_mesh(template, Params(record.beta, record.theta,
                                                 record.gamma))
            gt_vertices = gt_mesh.vertices
        acc.add(pred_kp3d=pred.keypoints3d, gt_kp3d=record.keypoints3d,
                pred_vertices=pred.vertices, gt_vertices=gt_vertices,
                pred2d=pred2d, gt2d=record.keypoints2d,
                visibility=record.visibility)
        if args.csv:
            csv_rows.append((i, acc._jpe[-1] if acc._jpe else ""))
    report = acc.report()
    doc = report.to_dict()
    doc["n_failed_fits"] = n_failed
    with open(args.out, "w") as f:
        json.dump(doc, f, sort_keys=True, indent=2)
    if args.csv:
        with open(args.csv, "w") as f:
            f.write("index,pa_mpjpe\n")
            for i, v in csv_rows:
                f.write(f"{i},{v}\n")
    print("eval: pa_mpjpe={} pa_mpvpe={} auc={} pck={} instances={} skipped_hth={}".format(
        report.pa_mpjpe, report.pa_mpvpe, report.auc, report.pck,
        report.n_instances, report.n_skipped_hth))
    return 0


def cmd_aggregate(args) -> int:
    with open(args.sources) as f:
        try:
            src_doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ParseError(f"sources JSON is malformed: {e}") from e
    if not isinstance(src_doc, list):
        raise ValidationError("sources file must be a JSON list")
    sources = [DatasetSource(id=d["id"], manifest=d["manifest"],
                             label_kind=d.get("label_kind", "full_3d"),
                             weight=d.get("weight"))
               for d in src_doc]
    agg = aggregate(sources, mode=args.mode)
    train_idx, val_idx = split(agg, ratio=args.ratio, seed=args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, idx in (("train", train_idx), ("val", val_idx)):
        _write_jsonl(out / f"{name}.jsonl", (
            {"record": os.path.relpath(agg.paths[i], out),
             "source": agg.sources[agg.source_idx[i]].id}
            for i in idx))
    summary = {
        "n_records": len(agg.records),
        "n_train": int(len(train_idx)),
        "n_val": int(len(val_idx)),
        "sources": [
            {"id": s.id, "weight": s.resolved_weight(),
             "records": int((agg.source_idx == si).sum()),
             "probability_mass": float(agg.probabilities[agg.source_idx == si].sum())}
            for si, s in enumerate(agg.sources)],
    }
    with open(out / "summary.json", "w") as f:
        json.dump(summary, f, sort_keys=True, indent=2)
    if args.demo_batch:
        batch = sample_batch(agg, seed=args.seed, batch_size=args.demo_batch)
        hist: dict[str, int] = {}
        for rec in batch:
            hist[rec.source] = hist.get(rec.source, 0) + 1
        print(f"demo batch by source: {dict(sorted(hist.items()))}")
    print("aggregate: records={} train={} val={}".format(
        summary["n_records"], summary["n_train"], summary["n_val"]))
    return 0


# ---------------------------------------------------------------------------
# parser

def _build_parser(cfg: dict) -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="quadfit",
        description="Quadruped model toolkit: toy assets, synthetic scenes, "
                    "keypoint fitting, evaluation, dataset aggregation.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="RNG seed (default 0)")
    common.add_argument("--threads", type=int, default=1,
                        help="worker threads for batch work (default 1)")
    common.add_argument("--config", type=str, default=None,
                        help="JSON file of per-subcommand option defaults")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("make-toy", parents=[common],
                        help="write a toy template (and optional library/prior)")
    p.add_argument("--out", required=True, help="template JSON path")
    p.add_argument("--n-joints", type=int, default=18)
    p.add_argument("--n-beta", type=int, default=6)
    p.add_argument("--v-count", type=int, default=None)
    p.add_argument("--n-kp", type=int, default=26)
    p.add_argument("--pose-library", default=None, help="also write a pose library")
    p.add_argument("--poses", type=int, default=8, help="pose library size")
    p.add_argument("--prior", default=None, help="also write a toy prior")
    p.add_argument("--obj", default=None, help="also export the rest mesh as OBJ")
    p.set_defaults(func=cmd_make_toy)
    _apply_config(p, "make-toy", cfg)

    p = subs.add_parser("sample", parents=[common], help="draw synthetic scenes")
    p.add_argument("--template", required=True)
    p.add_argument("--prior", required=True)
    p.add_argument("--pose-library", required=True)
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--image-size", type=int, default=DEFAULT_IMAGE_SIZE[0])
    p.add_argument("--out", required=True, help="scenes JSONL path")
    p.set_defaults(func=cmd_sample)
    _apply_config(p, "sample", cfg)

    p = subs.add_parser("rasterize", parents=[common],
                        help="render scenes to masks/depth/annotations")
    p.add_argument("--template", required=True)
    p.add_argument("--scenes", required=True, help="scenes JSONL from sample")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--source-id", default="CtrlAni3D")
    p.add_argument("--backgrounds", default=None,
                   help="directory of PNG backgrounds to composite")
    p.set_defaults(func=cmd_rasterize)
    _apply_config(p, "rasterize", cfg)

    p = subs.add_parser("filter", parents=[common],
                        help="bucket records by mask cycle consistency")
    p.add_argument("--manifest", required=True)
    p.add_argument("--candidate-masks", required=True,
                   help="directory of re-estimated masks (stem-matched PNGs)")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_filter)
    _apply_config(p, "filter", cfg)

    p = subs.add_parser("fit", parents=[common], help="fit parameters to annotations")
    p.add_argument("--template", required=True)
    p.add_argument("--prior", required=True)
    p.add_argument("--annotations", required=True, help="manifest JSONL")
    p.add_argument("--out", required=True, help="fits JSONL path")
    p.add_argument("--use-3d", action="store_true",
                   help="include 3D supervision from the records")
    p.set_defaults(func=cmd_fit)
    _apply_config(p, "fit", cfg)

    p = subs.add_parser("eval", parents=[common], help="evaluate fits against annotations")
    p.add_argument("--template", required=True)
    p.add_argument("--fits", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--pck", action="append", default=[],
                   help="PCK spec, hth:F or frac:F (repeatable; default hth:0.5)")
    p.add_argument("--csv", default=None, help="optional per-instance CSV")
    p.set_defaults(func=cmd_eval)
    _apply_config(p, "eval", cfg)

    p = subs.add_parser("aggregate", parents=[common],
                        help="merge sources, split, and summarize sampling")
    p.add_argument("--sources", required=True,
                   help="JSON list of {id, manifest, label_kind, weight}")
    p.add_argument("--mode", choices=("per_record", "per_dataset"),
                   default="per_record")
    p.add_argument("--ratio", type=float, default=VALIDATION_RATIO)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--demo-batch", type=int, default=0,
                   help="also draw one batch and print its source histogram")
    p.set_defaults(func=cmd_aggregate)
    _apply_config(p, "aggregate", cfg)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    _setup_logging()
    try:
        cfg = _scan_config(argv)
        parser = _build_parser(cfg)
        args = parser.parse_args(argv)
        log.info("resolved config: %s",
                 {k: v for k, v in sorted(vars(args).items()) if k != "func"})
        print(_DEFAULTS_LINE)
        rc = args.func(args)
        return 0 if rc is None else int(rc)
    except (ValidationError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
