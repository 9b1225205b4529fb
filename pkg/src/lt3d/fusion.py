"""Late fusion of LiDAR 3D and RGB 2D detections.

The pipeline per frame:

1. project LiDAR boxes into every camera;
2. match projections to RGB boxes by IoU (:func:`match_cross_modal_2d`);
3. drop unmatched RGB detections;
4. keep unmatched LiDAR detections with score multiplied by ``w``;
5. matched pairs agreeing on class: LiDAR box and class, score
   ``calibrated_rgb * calibrated_lidar / prior`` (clipped to [0, 1]);
6. matched pairs disagreeing on class: LiDAR box, RGB class, calibrated RGB score.

Matching depends only on geometry, so :func:`plan_mmlf` computes it once and
:func:`apply_plan` re-scores cheaply; calibration tuning relies on this.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .detections import Detection2D, Detection3D, RecordSet
from .evaluation import DEFAULT_THRESHOLDS, ClassProblem, prepare_class_3d
from .geometry import Camera, bev_iou, project_box3d_to_image
from .matching import ProjectedBox, match_cross_modal_2d, match_cross_modal_3d
from .taxonomy import Taxonomy

log = logging.getLogger(__name__)

TEMPERATURE_GRID = tuple(float(v) for v in np.geomspace(0.25, 4.0, 15))
PRIOR_GRID = tuple(float(v) for v in np.geomspace(0.2, 5.0, 11))


@dataclass(frozen=True)
class FusionConfig:
    iou_threshold: float = 0.5
    unmatched_lidar_weight: float = 0.4
    mmf_radius_m: float = 4.0
    nms_iou_bev: float = 0.1
    score_clip: bool = True
    class_aware_mmf: bool = True

    def __post_init__(self):
        for name in ("iou_threshold", "unmatched_lidar_weight", "nms_iou_bev"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1], got {v}")
        if not self.mmf_radius_m > 0:
            raise ValueError("mmf_radius_m must be positive")

    @classmethod
    def load(cls, path) -> "FusionConfig":
        with open(path) as f:
            data = json.load(f)
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"{path}: unknown FusionConfig fields {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class CalibrationTable:
    model_id: str = "model"
    temperature: Mapping[str, float] = field(default_factory=dict)
    prior: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        temperature = {k: float(v) for k, v in self.temperature.items()}
        prior = {k: float(v) for k, v in self.prior.items()}
        if any(not v > 0 for v in temperature.values()):
            raise ValueError("temperatures must be positive")
        if any(not v > 0 for v in prior.values()):
            raise ValueError("priors must be positive")
        object.__setattr__(self, "temperature", temperature)
        object.__setattr__(self, "prior", prior)

    def tau(self, cls: str) -> float:
        return self.temperature.get(cls, 1.0)

    def p(self, cls: str) -> float:
        return self.prior.get(cls, 1.0)

    def with_temperature(self, cls: str, tau: float) -> "CalibrationTable":
        return CalibrationTable(self.model_id, {**self.temperature, cls: tau}, self.prior)

    def with_prior(self, cls: str, p: float) -> "CalibrationTable":
        return CalibrationTable(self.model_id, self.temperature, {**self.prior, cls: p})

    def to_dict(self) -> dict:
        return {"model_id": self.model_id, "temperature": dict(self.temperature), "prior": dict(self.prior)}

    @classmethod
    def from_dict(cls, obj: dict) -> "CalibrationTable":
        return cls(str(obj.get("model_id", "model")), obj.get("temperature", {}), obj.get("prior", {}))

    @classmethod
    def load(cls, path) -> "CalibrationTable":
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")


def calibrate_score(logit: float, tau: float) -> float:
    """``sigmoid(logit / tau)``."""
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    z = logit / tau
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def probabilistic_fuse(p_rgb: float, p_lidar: float, prior: float, clip: bool = True) -> float:
    """Posterior product over the class prior, optionally clipped to [0, 1]."""
    if not prior > 0:
        raise ValueError(f"prior must be positive, got {prior}")
    for name, p in (("p_rgb", p_rgb), ("p_lidar", p_lidar)):
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1], got {p}")
    fused = p_rgb * p_lidar / prior
    return min(fused, 1.0) if clip else fused


def _by_frame(records) -> dict[str, list]:
    frames: dict[str, list] = {}
    for r in records:
        frames.setdefault(r.frame_id, []).append(r)
    return frames


def mmf_filter(lidar, rgb3d, cfg: FusionConfig = FusionConfig()) -> RecordSet:
    """Keep LiDAR detections within ``cfg.mmf_radius_m`` of an RGB 3D detection in the same frame."""
    rgb_frames = _by_frame(rgb3d)
    kept = []
    for frame, dets in _by_frame(lidar).items():
        res = match_cross_modal_3d(dets, rgb_frames.get(frame, []), cfg.mmf_radius_m, cfg.class_aware_mmf)
        matched = {i for i, _ in res.pairs}
        kept.extend(d for i, d in enumerate(dets) if i in matched)
    return RecordSet(kept, kind="det3d")


# --- MMLF -----------------------------------------------------------------

UNMATCHED, AGREE, DISAGREE = "unmatched", "agree", "disagree"


@dataclass(frozen=True)
class PlanEntry:
    """Outcome for one LiDAR detection; ``rgb`` is set for matched entries."""

    lidar: Detection3D
    kind: str
    rgb: Optional[Detection2D] = None

    @property
    def out_class(self) -> str:
        return self.rgb.cls if self.kind == DISAGREE else self.lidar.cls


def _sort_key(d: Detection3D):
    return (d.frame_id, -d.score, d.cls, d.box.center, d.box.size, d.box.yaw)


def plan_mmlf(lidar, rgb2d, cameras: Sequence[Camera], cfg: FusionConfig = FusionConfig()) -> list[PlanEntry]:
    """Geometric stage of the fusion: match every LiDAR detection against the RGB detections."""
    cams = {c.camera_id: c for c in cameras}
    for r in rgb2d:
        if r.camera_id not in cams:
            raise ValueError(f"no calibration for camera {r.camera_id!r} (frame {r.frame_id})")
    rgb_frames = _by_frame(rgb2d)
    plan = []
    for frame, dets in _by_frame(lidar).items():
        rgb = rgb_frames.get(frame, [])
        if not rgb:
            plan.extend(PlanEntry(d, UNMATCHED) for d in dets)
            continue
        used_cams = {r.camera_id for r in rgb}
        proj = []
        for i, d in enumerate(dets):
            for cam_id in sorted(used_cams):
                cam = cams[cam_id]
                box = project_box3d_to_image(d.box, cam.pose, cam.intrinsics)
                if box is not None:
                    proj.append(ProjectedBox(i, cam_id, box))
        partner = match_cross_modal_2d(proj, rgb, cfg.iou_threshold, n_lidar=len(dets)).partner_of()
        for i, d in enumerate(dets):
            j = partner.get(i)
            if j is None:
                plan.append(PlanEntry(d, UNMATCHED))
            else:
                plan.append(PlanEntry(d, AGREE if rgb[j].cls == d.cls else DISAGREE, rgb[j]))
    return plan


def entry_score(e: PlanEntry, calib_lidar: CalibrationTable, calib_rgb: CalibrationTable,
                cfg: FusionConfig) -> float:
    if e.kind == UNMATCHED:
        return cfg.unmatched_lidar_weight * e.lidar.score
    p_rgb = calibrate_score(e.rgb.effective_logit, calib_rgb.tau(e.rgb.cls))
    if e.kind == DISAGREE:
        return p_rgb
    p_lidar = calibrate_score(e.lidar.effective_logit, calib_lidar.tau(e.lidar.cls))
    prior = calib_lidar.p(e.lidar.cls) * calib_rgb.p(e.lidar.cls)
    return probabilistic_fuse(p_rgb, p_lidar, prior, cfg.score_clip)


def apply_plan(plan: Sequence[PlanEntry], calib_lidar: CalibrationTable, calib_rgb: CalibrationTable,
               cfg: FusionConfig = FusionConfig()) -> RecordSet:
    out = []
    for e in plan:
        out.append(Detection3D(e.lidar.frame_id, e.lidar.box, e.out_class,
                               entry_score(e, calib_lidar, calib_rgb, cfg), None, "fused"))
    out.sort(key=_sort_key)
    return RecordSet(out, kind="det3d")


def mmlf_fuse(lidar, rgb2d, cameras: Sequence[Camera], calib_lidar: CalibrationTable = CalibrationTable(),
              calib_rgb: CalibrationTable = CalibrationTable(), cfg: FusionConfig = FusionConfig()) -> RecordSet:
    """Fuse LiDAR 3D detections with RGB 2D detections; output geometry is always LiDAR's.

    The prior of a class is the product of the two tables' prior entries
    (each defaults to 1).
    """
    return apply_plan(plan_mmlf(lidar, rgb2d, cameras, cfg), calib_lidar, calib_rgb, cfg)


def nms_within_class(dets, iou_bev: float) -> RecordSet:
    """Per frame and class, suppress detections whose BEV footprint IoU with a kept one exceeds ``iou_bev``.

    Output keeps the input order of the surviving records.
    """
    if not 0.0 < iou_bev < 1.0:
        raise ValueError("iou_bev must lie in (0, 1)")
    records = list(dets)
    groups: dict[tuple[str, str], list[int]] = {}
    for i, d in enumerate(records):
        groups.setdefault((d.frame_id, d.cls), []).append(i)
    keep = set()
    for idx in groups.values():
        order = sorted(idx, key=lambda i: (-records[i].score, i))
        kept: list[int] = []
        for i in order:
            if all(bev_iou(records[i].box, records[k].box) <= iou_bev for k in kept):
                kept.append(i)
        keep.update(kept)
    return RecordSet([d for i, d in enumerate(records) if i in keep], kind="det3d")


# --- greedy calibration tuning -------------------------------------------

def _class_ap(problem: ClassProblem, scores: Sequence[float], thresholds: Sequence[float]) -> Optional[float]:
    aps = [problem.evaluate(scores, th, 0, threshold=th).ap for th in thresholds]
    if any(a is None for a in aps):
        return None
    return float(sum(aps) / len(aps))


def _grid_with_neutral(grid: Sequence[float]) -> list[float]:
    values = sorted({float(v) for v in grid} | {1.0})
    if values[0] <= 0:
        raise ValueError("grid values must be positive")
    return values


def _pick(candidates: Sequence[float], objective: Callable[[float], float]) -> tuple[float, float]:
    """Argmax over ``candidates``; the neutral value 1 wins ties, else the smallest candidate."""
    scored = [(objective(v), v) for v in candidates]
    best = max(s for s, _ in scored)
    neutral = [s for s, v in scored if v == 1.0]
    if neutral and neutral[0] == best:
        return 1.0, best
    return min(v for s, v in scored if s == best), best


class _FusedObjective:
    """Per-class AP of fused output for candidate calibration tables.

    The fused class of each plan entry is fixed by matching, so the per-class
    matching problems are built once and only re-scored.
    """

    def __init__(self, plan, gts, taxonomy, cfg, thresholds):
        self.cfg = cfg
        self.thresholds = tuple(thresholds)
        self.entries: dict[str, list[PlanEntry]] = {}
        for e in plan:
            if taxonomy.is_fine(e.out_class):
                self.entries.setdefault(e.out_class, []).append(e)
        gts = list(gts)
        self.problems: dict[str, ClassProblem] = {}
        for cls in taxonomy.fine_classes:
            located = [_Located(e.lidar.frame_id, e.lidar.box, cls) for e in self.entries.get(cls, [])]
            self.problems[cls] = prepare_class_3d(located, gts, cls, taxonomy, max(self.thresholds))

    def class_ap(self, cls, calib_lidar, calib_rgb) -> Optional[float]:
        scores = [entry_score(e, calib_lidar, calib_rgb, self.cfg) for e in self.entries.get(cls, [])]
        return _class_ap(self.problems[cls], scores, self.thresholds)

    def mean_ap(self, calib_lidar, calib_rgb) -> Optional[float]:
        aps = [self.class_ap(c, calib_lidar, calib_rgb) for c in self.problems]
        aps = [a for a in aps if a is not None]
        return sum(aps) / len(aps) if aps else None


@dataclass(frozen=True)
class _Located:
    frame_id: str
    box: object
    cls: str


class _SingleModelObjective:
    """Per-class AP of one model's own calibrated detections."""

    def __init__(self, dets, gts, taxonomy, thresholds):
        self.thresholds = tuple(thresholds)
        self.dets: dict[str, list[Detection3D]] = {}
        for d in dets:
            if taxonomy.is_fine(d.cls):
                self.dets.setdefault(d.cls, []).append(d)
        gts = list(gts)
        self.problems = {cls: prepare_class_3d(self.dets.get(cls, []), gts, cls, taxonomy, max(self.thresholds))
                         for cls in taxonomy.fine_classes}

    def class_ap(self, cls, table) -> Optional[float]:
        tau = table.tau(cls)
        scores = [calibrate_score(d.effective_logit, tau) for d in self.dets.get(cls, [])]
        return _class_ap(self.problems[cls], scores, self.thresholds)

    def mean_ap(self, table) -> Optional[float]:
        aps = [self.class_ap(c, table) for c in self.problems]
        aps = [a for a in aps if a is not None]
        return sum(aps) / len(aps) if aps else None


def tune_temperatures_greedy(dets, gts, taxonomy: Taxonomy, grid: Sequence[float] = TEMPERATURE_GRID,
                             model_id: str = "model", thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
                             ) -> CalibrationTable:
    """Greedy per-class temperatures maximizing each class's validation AP of ``dets`` alone."""
    objective = _SingleModelObjective(dets, gts, taxonomy, thresholds)
    return _tune(CalibrationTable(model_id), "temperature", grid, taxonomy, gts,
                 class_ap=lambda t, c: objective.class_ap(c, t), overall=objective.mean_ap)


def tune_fusion_calibration(lidar, rgb2d, cameras: Sequence[Camera], gts, taxonomy: Taxonomy,
                            cfg: FusionConfig = FusionConfig(),
                            calib_lidar: Optional[CalibrationTable] = None,
                            calib_rgb: Optional[CalibrationTable] = None,
                            temperature_grid: Sequence[float] = TEMPERATURE_GRID,
                            prior_grid: Sequence[float] = PRIOR_GRID,
                            thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
                            tune: Sequence[str] = ("lidar", "rgb", "prior"),
                            ) -> tuple[CalibrationTable, CalibrationTable]:
    """Tune LiDAR temperatures, RGB temperatures, then priors against fused validation AP.

    Each stage visits classes by descending train count and keeps every value
    tuned so far. Priors are written into the RGB table.
    """
    objective = _FusedObjective(plan_mmlf(lidar, rgb2d, cameras, cfg), gts, taxonomy, cfg, thresholds)
    lid = calib_lidar or CalibrationTable("lidar")
    rgb = calib_rgb or CalibrationTable("rgb")
    if "lidar" in tune:
        lid = _tune(lid, "temperature", temperature_grid, taxonomy, gts,
                    class_ap=lambda t, c: objective.class_ap(c, t, rgb),
                    overall=lambda t: objective.mean_ap(t, rgb))
    if "rgb" in tune:
        rgb = _tune(rgb, "temperature", temperature_grid, taxonomy, gts,
                    class_ap=lambda t, c: objective.class_ap(c, lid, t),
                    overall=lambda t: objective.mean_ap(lid, t))
    if "prior" in tune:
        rgb = _tune(rgb, "prior", prior_grid, taxonomy, gts,
                    class_ap=lambda t, c: objective.class_ap(c, lid, t),
                    overall=lambda t: objective.mean_ap(lid, t))
    return lid, rgb


def tune_priors_greedy(lidar, rgb2d, cameras: Sequence[Camera], gts, taxonomy: Taxonomy,
                       calib_lidar: CalibrationTable, calib_rgb: CalibrationTable,
                       cfg: FusionConfig = FusionConfig(), grid: Sequence[float] = PRIOR_GRID,
                       thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> CalibrationTable:
    """Greedy per-class priors maximizing fused validation AP; returns the RGB table with priors set."""
    _, rgb = tune_fusion_calibration(lidar, rgb2d, cameras, gts, taxonomy, cfg, calib_lidar, calib_rgb,
                                     prior_grid=grid, thresholds=thresholds, tune=("prior",))
    return rgb


def _tune(table: CalibrationTable, what: str, grid, taxonomy: Taxonomy, gts,
          class_ap: Callable[[CalibrationTable, str], Optional[float]],
          overall: Callable[[CalibrationTable], Optional[float]]) -> CalibrationTable:
    candidates = _grid_with_neutral(grid)
    present = {g.cls for g in gts}
    start = table
    for cls in taxonomy.by_cardinality():
        setter = table.with_temperature if what == "temperature" else table.with_prior
        if cls not in present:
            log.warning("class %s has no validation ground truth; %s kept at 1", cls, what)
            table = setter(cls, 1.0)
            continue

        def score(v, setter=setter, cls=cls):
            ap = class_ap(setter(cls, v), cls)
            return -1.0 if ap is None else ap

        value, _ = _pick(candidates, score)
        table = setter(cls, value)
    before, after = overall(start), overall(table)
    if before is not None and (after is None or after < before):
        # classes interact through a custom objective; never hand back a worse table
        log.warning("greedy %s tuning lowered validation mAP (%.6f < %.6f); keeping the input table",
                    what, after if after is not None else float("nan"), before)
        return start
    return table
