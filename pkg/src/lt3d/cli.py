"""Command-line front door: ``lt3d <command> [flags]``.

Exit status: 0 success, 1 validation / input error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

from . import evaluation as ev
from .detections import RecordError, load_detections, save_detections
from .fusion import (PRIOR_GRID, TEMPERATURE_GRID, CalibrationTable, FusionConfig, mmf_filter,
                     mmlf_fuse, nms_within_class, tune_fusion_calibration, tune_temperatures_greedy)
from .geometry import load_cameras, project_box3d_to_image, save_cameras
from .synth import ScenarioConfig, simulate
from .taxonomy import Taxonomy, TaxonomyError

log = logging.getLogger("lt3d")


class UsageError(Exception):
    pass


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _range(text: str) -> tuple[float, float]:
    if text in ev.RANGE_PRESETS:
        return ev.RANGE_PRESETS[text]
    vals = _floats(text.replace("inf", "Infinity"))
    if len(vals) != 2:
        raise argparse.ArgumentTypeError("range must be 'min,max' or a preset (0-10m, 10-20m, 20-30m)")
    return vals[0], vals[1]


def threads() -> int:
    """Worker cap from LT3D_THREADS (0 or unset: one per CPU)."""
    raw = os.environ.get("LT3D_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"LT3D_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise UsageError("LT3D_THREADS must be >= 0")
    return n or (os.cpu_count() or 1)


def _stamp(args, payload: dict) -> dict:
    if getattr(args, "stamp", False):
        payload["generated_at"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    return payload


def _write_json(path, payload) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=False) + "\n")


def _prefix(out: str) -> Path:
    p = Path(out)
    return p.with_suffix("") if p.suffix in (".json", ".csv") else p


def _write_report(args, report: ev.EvalReport) -> None:
    prefix = _prefix(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    _write_json(prefix.with_suffix(".json"), _stamp(args, report.to_dict()))
    prefix.with_suffix(".csv").write_text(report.to_csv())
    if getattr(args, "pr_curves", None):
        out_dir = Path(args.pr_curves)
        out_dir.mkdir(parents=True, exist_ok=True)
        for cls in report.class_ap[report_levels(report)[0]]:
            (out_dir / f"{cls}.csv").write_text(report.pr_curves_csv(cls))
    log.info("mAP %s", {k: v for k, v in report.mean_ap.items()})


def report_levels(report: ev.EvalReport) -> list[int]:
    return list(report.class_ap)


def cmd_eval(args) -> None:
    tax = Taxonomy.load(args.taxonomy)
    gts = load_detections(args.gt, "gt", tax)
    dets = load_detections(args.det, "det3d", tax)
    kw = dict(lca_levels=tuple(args.lca), nuscenes_clip=args.nuscenes_clip,
              zero_missing=args.zero_missing, keep_curves=bool(args.pr_curves), workers=threads())
    if args.range is not None:
        report = ev.range_filtered_eval(dets, gts, tax, args.range, args.thresholds, **kw)
    else:
        report = ev.evaluate(dets, gts, tax, args.thresholds, **kw)
    _write_report(args, report)


def cmd_eval2d(args) -> None:
    tax = Taxonomy.load(args.taxonomy)
    gts = load_detections(args.gt, "gt2d", tax)
    dets = load_detections(args.det, "det2d", tax)
    report = ev.eval_2d(dets, gts, tax, args.iou_thresholds, tuple(args.lca), args.nuscenes_clip,
                        args.zero_missing, keep_curves=bool(args.pr_curves))
    _write_report(args, report)


def _config(args) -> FusionConfig:
    return FusionConfig.load(args.config) if args.config else FusionConfig()


def _calib(path: Optional[str], model_id: str) -> CalibrationTable:
    return CalibrationTable.load(path) if path else CalibrationTable(model_id)


def cmd_fuse(args) -> None:
    tax = Taxonomy.load(args.taxonomy) if args.taxonomy else None
    cfg = _config(args)
    lidar = load_detections(args.lidar, "det3d", tax)
    rgb = load_detections(args.rgb2d, "det2d", tax)
    fused = mmlf_fuse(lidar, rgb, load_cameras(args.cameras), _calib(args.calib_lidar, "lidar"),
                      _calib(args.calib_rgb, "rgb"), cfg)
    if args.nms:
        fused = nms_within_class(fused, cfg.nms_iou_bev)
    save_detections(fused, args.out)
    log.info("fused %d LiDAR detections -> %d outputs", len(lidar), len(fused))


def cmd_filter(args) -> None:
    tax = Taxonomy.load(args.taxonomy) if args.taxonomy else None
    cfg = _config(args)
    if args.radius is not None:
        cfg = FusionConfig(**{**cfg.to_dict(), "mmf_radius_m": args.radius})
    if args.class_agnostic:
        cfg = FusionConfig(**{**cfg.to_dict(), "class_aware_mmf": False})
    lidar = load_detections(args.lidar, "det3d", tax)
    rgb3d = load_detections(args.rgb3d, "det3d", tax)
    kept = mmf_filter(lidar, rgb3d, cfg)
    save_detections(kept, args.out)
    log.info("kept %d of %d LiDAR detections", len(kept), len(lidar))


def cmd_calibrate(args) -> None:
    tax = Taxonomy.load(args.taxonomy)
    gts = load_detections(args.val_gt, "gt", tax)
    grid = args.grid or TEMPERATURE_GRID
    if args.partner is None:
        if args.model == "rgb":
            raise UsageError("calibrate --model rgb needs --partner (LiDAR detections) and --cameras")
        dets = load_detections(args.val_det, "det3d", tax)
        table = tune_temperatures_greedy(dets, gts, tax, grid, model_id=args.model_id or "lidar")
    else:
        if not args.cameras:
            raise UsageError("--partner requires --cameras")
        cams = load_cameras(args.cameras)
        cfg = _config(args)
        if args.model == "lidar":
            lidar = load_detections(args.val_det, "det3d", tax)
            rgb = load_detections(args.partner, "det2d", tax)
            table, _ = tune_fusion_calibration(lidar, rgb, cams, gts, tax, cfg,
                                               CalibrationTable(args.model_id or "lidar"),
                                               _calib(args.partner_calib, "rgb"),
                                               temperature_grid=grid, tune=("lidar",))
        else:
            rgb = load_detections(args.val_det, "det2d", tax)
            lidar = load_detections(args.partner, "det3d", tax)
            _, table = tune_fusion_calibration(lidar, rgb, cams, gts, tax, cfg,
                                               _calib(args.partner_calib, "lidar"),
                                               CalibrationTable(args.model_id or "rgb"),
                                               temperature_grid=grid, prior_grid=args.prior_grid or PRIOR_GRID,
                                               tune=("rgb", "prior"))
    table.save(args.out)


def cmd_confusion(args) -> None:
    tax = Taxonomy.load(args.taxonomy)
    cm = ev.confusion_matrix(load_detections(args.det, "det3d", tax), load_detections(args.gt, "gt", tax),
                             tax, args.superclass, args.dist)
    payload = cm.to_dict()
    payload["dist_m"] = args.dist
    _write_json(args.out, _stamp(args, payload))


def cmd_recall(args) -> None:
    tax = Taxonomy.load(args.taxonomy)
    rec = ev.average_recall(load_detections(args.det, "det3d", tax), load_detections(args.gt, "gt", tax), tax,
                            args.threshold, args.group_level, args.visibility, args.range)
    payload = {"config": {"threshold": args.threshold, "group_level": args.group_level,
                          "visibility": args.visibility,
                          "range_m": None if args.range is None else [v if math.isfinite(v) else "inf"
                                                                      for v in args.range]},
               "recall": rec}
    _write_json(args.out, _stamp(args, payload))


def cmd_synth(args) -> None:
    cfg = ScenarioConfig.load(args.scenario)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.n_frames is not None:
        changes["n_frames"] = args.n_frames
    if changes:
        cfg = cfg.with_(**changes)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    gt, lidar, rgb = simulate(cfg)
    save_detections(gt, out / "gt.jsonl")
    save_detections(lidar, out / "lidar.jsonl")
    save_detections(rgb, out / "rgb2d.jsonl")
    save_cameras(cfg.cameras, out / "cameras.json")
    cfg.taxonomy.save(out / "taxonomy.json")
    log.info("wrote %d GT, %d LiDAR, %d RGB records to %s", len(gt), len(lidar), len(rgb), out)


def cmd_project(args) -> None:
    tax = Taxonomy.load(args.taxonomy) if args.taxonomy else None
    dets = load_detections(args.det, "det3d", tax)
    cams = load_cameras(args.cameras)
    lines = []
    for i, d in enumerate(dets):
        for cam in cams:
            box = project_box3d_to_image(d.box, cam.pose, cam.intrinsics)
            if box is not None:
                lines.append(json.dumps({"frame_id": d.frame_id, "det_index": i, "camera_id": cam.camera_id,
                                         "class": d.cls, "score": d.score, "bbox": box.as_list()}))
    Path(args.out).write_text("".join(line + "\n" for line in lines))


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lt3d", description="Long-tailed 3D detection fusion and evaluation toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out_help="output path"):
        sp.add_argument("--out", required=True, help=out_help)
        sp.add_argument("--stamp", action="store_true", help="embed a timestamp in JSON reports")

    e = sub.add_parser("eval", help="center-distance mAP / mAP_H")
    e.add_argument("--gt", required=True)
    e.add_argument("--det", required=True)
    e.add_argument("--taxonomy", required=True)
    e.add_argument("--thresholds", type=_floats, default=list(ev.DEFAULT_THRESHOLDS))
    e.add_argument("--lca", type=_ints, default=[0])
    e.add_argument("--range", type=_range, default=None)
    e.add_argument("--nuscenes-clip", action="store_true")
    e.add_argument("--zero-missing", action="store_true", help="score classes without GT as 0")
    e.add_argument("--pr-curves", default=None, help="directory for per-class PR-curve CSVs")
    common(e, "report prefix; writes <prefix>.json and <prefix>.csv")
    e.set_defaults(func=cmd_eval)

    e2 = sub.add_parser("eval2d", help="image-plane AP with IoU matching")
    e2.add_argument("--gt", required=True)
    e2.add_argument("--det", required=True)
    e2.add_argument("--taxonomy", required=True)
    e2.add_argument("--iou-thresholds", type=_floats, default=[0.5])
    e2.add_argument("--lca", type=_ints, default=[0])
    e2.add_argument("--nuscenes-clip", action="store_true")
    e2.add_argument("--zero-missing", action="store_true")
    e2.add_argument("--pr-curves", default=None)
    common(e2, "report prefix")
    e2.set_defaults(func=cmd_eval2d)

    f = sub.add_parser("fuse", help="multi-modal late fusion of LiDAR 3D and RGB 2D detections")
    f.add_argument("--lidar", required=True)
    f.add_argument("--rgb2d", required=True)
    f.add_argument("--cameras", required=True)
    f.add_argument("--calib-lidar")
    f.add_argument("--calib-rgb")
    f.add_argument("--config")
    f.add_argument("--taxonomy")
    f.add_argument("--nms", action="store_true", help="apply within-class BEV NMS to the output")
    common(f)
    f.set_defaults(func=cmd_fuse)

    fl = sub.add_parser("filter", help="keep LiDAR detections near an RGB 3D detection")
    fl.add_argument("--lidar", required=True)
    fl.add_argument("--rgb3d", required=True)
    fl.add_argument("--config")
    fl.add_argument("--radius", type=float)
    fl.add_argument("--class-agnostic", action="store_true")
    fl.add_argument("--taxonomy")
    common(fl)
    fl.set_defaults(func=cmd_filter)

    c = sub.add_parser("calibrate", help="greedy per-class temperature (and prior) tuning")
    c.add_argument("--model", choices=["lidar", "rgb"], required=True)
    c.add_argument("--val-gt", required=True)
    c.add_argument("--val-det", required=True)
    c.add_argument("--taxonomy", required=True)
    c.add_argument("--partner", help="the other modality's validation detections (enables fused tuning)")
    c.add_argument("--partner-calib")
    c.add_argument("--cameras")
    c.add_argument("--config")
    c.add_argument("--grid", type=_floats)
    c.add_argument("--prior-grid", type=_floats)
    c.add_argument("--model-id")
    common(c)
    c.set_defaults(func=cmd_calibrate)

    cm = sub.add_parser("confusion", help="per-superclass detection confusion matrix")
    cm.add_argument("--gt", required=True)
    cm.add_argument("--det", required=True)
    cm.add_argument("--taxonomy", required=True)
    cm.add_argument("--superclass", required=True)
    cm.add_argument("--dist", type=float, default=2.0)
    common(cm)
    cm.set_defaults(func=cmd_confusion)

    r = sub.add_parser("recall", help="average recall per fine or coarse class")
    r.add_argument("--gt", required=True)
    r.add_argument("--det", required=True)
    r.add_argument("--taxonomy", required=True)
    r.add_argument("--threshold", type=float, default=2.0)
    r.add_argument("--group-level", choices=["fine", "coarse"], default="fine")
    r.add_argument("--visibility", choices=["0-40", "40-60", "60-80", "80-100"])
    r.add_argument("--range", type=_range, default=None)
    common(r)
    r.set_defaults(func=cmd_recall)

    s = sub.add_parser("synth", help="generate a synthetic scene and simulated detections")
    s.add_argument("--scenario", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--n-frames", type=int)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_synth)

    pj = sub.add_parser("project", help="per-camera image hulls of 3D detections")
    pj.add_argument("--det", required=True)
    pj.add_argument("--cameras", required=True)
    pj.add_argument("--taxonomy")
    common(pj)
    pj.set_defaults(func=cmd_project)
    return p


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"lt3d: error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"lt3d: error: {exc}", file=sys.stderr)
        return 2
    except (RecordError, TaxonomyError, ValueError, KeyError) as exc:
        print(f"lt3d {args.command}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        name = getattr(exc, "filename", None)
        print(f"lt3d {args.command}: {f'{name}: ' if name else ''}{exc.strerror or exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
