"""Detection evaluation: AP / mAP, hierarchical AP with LCA ignore semantics,
confusion matrices, recall and stratified breakdowns.

Matching for class ``C`` at LCA level ``L``: detections of ``C`` are visited by
descending score (ties: input order). Each first takes the nearest unmatched
ground truth of class ``C`` within the threshold (true positive); failing that,
the nearest unmatched ground truth of a class within LCA distance ``L`` of
``C`` (ignored: dropped from the PR curve); otherwise it is a false positive.
The recall denominator counts class ``C`` ground truth only.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .geometry import iou_2d
from .taxonomy import Taxonomy, group_by_cardinality, members_of, siblings_within

DEFAULT_THRESHOLDS = (0.5, 1.0, 2.0, 4.0)
LCA_LEVELS = (0, 1, 2)
RANGE_PRESETS = {"0-10m": (0.0, 10.0), "10-20m": (10.0, 20.0), "20-30m": (20.0, 30.0)}

# nuScenes-style clipping: recall samples every 1%, operating points at or
# below 10% recall dropped, precision offset by 10% and renormalized.
CLIP_MIN_RECALL = 0.1
CLIP_MIN_PRECISION = 0.1
N_RECALL_SAMPLES = 101

TP, FP, IGNORED = 1, 0, -1

PARALLEL_MIN_RECORDS = 50_000


@dataclass
class PRCurve:
    recall: np.ndarray
    precision: np.ndarray
    score: np.ndarray


@dataclass
class APResult:
    cls: str
    lca_level: int
    threshold: float
    ap: Optional[float]
    tp: int
    fp: int
    ignored: int
    n_gt: int
    curve: Optional[PRCurve] = field(default=None, repr=False)


def _ap_all_point(labels: np.ndarray, n_gt: int) -> float:
    is_tp = labels == TP
    tp = np.cumsum(is_tp)
    fp = np.cumsum(~is_tp)
    precision = tp / (tp + fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    return float(np.sum(envelope[is_tp]) / n_gt)


def _ap_clipped(labels: np.ndarray, n_gt: int) -> float:
    is_tp = labels == TP
    tp = np.cumsum(is_tp)
    fp = np.cumsum(~is_tp)
    precision = tp / (tp + fp)
    recall = tp / n_gt
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    grid = np.arange(N_RECALL_SAMPLES) / (N_RECALL_SAMPLES - 1)
    idx = np.searchsorted(recall, grid, side="left")
    sampled = np.zeros(N_RECALL_SAMPLES)
    ok = idx < len(recall)
    sampled[ok] = envelope[idx[ok]]
    kept = sampled[round(100 * CLIP_MIN_RECALL) + 1:] - CLIP_MIN_PRECISION
    kept[kept < 0] = 0.0
    return float(np.mean(kept)) / (1.0 - CLIP_MIN_PRECISION)


def ap_from_labels(labels: Sequence[int], n_gt: int, nuscenes_clip: bool = False) -> Optional[float]:
    """AP of a ranked list of TP/FP/IGNORED labels against ``n_gt`` positives."""
    if n_gt <= 0:
        return None
    labels = np.asarray(labels, dtype=int)
    labels = labels[labels != IGNORED]
    if not np.any(labels == TP):
        return 0.0
    return _ap_clipped(labels, n_gt) if nuscenes_clip else _ap_all_point(labels, n_gt)


class ClassProblem:
    """Geometry-only matching problem for one class, reusable across score vectors.

    ``det_keys[i]`` / ``gt_keys[g]`` identify the frame (or frame/camera) of each
    record. ``cost(i, g)`` is the matching cost: a candidate is eligible when
    ``cost <= threshold_cost`` and the lowest cost wins.
    """

    def __init__(self, cls: str, det_keys: Sequence, gt_keys: Sequence, gt_classes: Sequence[str],
                 cost_fn: Callable[[Sequence[int], Sequence[int]], np.ndarray], max_cost: float,
                 taxonomy: Taxonomy):
        self.cls = cls
        self.n_det = len(det_keys)
        self.n_gt = sum(1 for c in gt_classes if c == cls)
        gt_by_key: dict = {}
        for g, k in enumerate(gt_keys):
            gt_by_key.setdefault(k, []).append(g)
        det_by_key: dict = {}
        for i, k in enumerate(det_keys):
            det_by_key.setdefault(k, []).append(i)
        # per detection: (cost, gt index, gt class) sorted by cost then index
        self.cands: list[list[tuple[float, int, str]]] = [[] for _ in range(self.n_det)]
        for k, d_idx in det_by_key.items():
            g_idx = gt_by_key.get(k)
            if not g_idx:
                continue
            cost = cost_fn(d_idx, g_idx)
            for a, i in enumerate(d_idx):
                row = [(float(cost[a, b]), g, gt_classes[g]) for b, g in enumerate(g_idx)
                       if cost[a, b] <= max_cost]
                row.sort(key=lambda t: (t[0], t[1]))
                self.cands[i] = row
        self._level_cands = {}
        for level in LCA_LEVELS:
            allowed = siblings_within(taxonomy, cls, level)
            per_det = []
            for row in self.cands:
                own = [(c, g, TP) for c, g, gc in row if gc == cls]
                other = [(c, g, IGNORED) for c, g, gc in row if gc in allowed]
                per_det.append(own + other)
            self._level_cands[level] = per_det

    def labels(self, scores: Sequence[float], threshold_cost: float, lca_level: int) -> tuple[np.ndarray, np.ndarray]:
        """Ranked detection order and the TP/FP/IGNORED label of each ranked detection."""
        scores = np.asarray(scores, dtype=float)
        order = np.lexsort((np.arange(self.n_det), -scores))
        cands = self._level_cands[lca_level]
        taken: set[int] = set()
        labels = np.empty(self.n_det, dtype=int)
        for rank, i in enumerate(order):
            label = FP
            for cost, g, kind in cands[i]:
                if cost <= threshold_cost and g not in taken:
                    taken.add(g)
                    label = kind
                    break
            labels[rank] = label
        return order, labels

    def evaluate(self, scores: Sequence[float], threshold_cost: float, lca_level: int,
                 nuscenes_clip: bool = False, threshold: Optional[float] = None,
                 keep_curve: bool = False) -> APResult:
        order, labels = self.labels(scores, threshold_cost, lca_level)
        ap = ap_from_labels(labels, self.n_gt, nuscenes_clip)
        tp = int(np.sum(labels == TP))
        ign = int(np.sum(labels == IGNORED))
        curve = None
        if keep_curve:
            kept = labels != IGNORED
            lab = labels[kept]
            tps = np.cumsum(lab == TP)
            fps = np.cumsum(lab == FP)
            with np.errstate(invalid="ignore", divide="ignore"):
                curve = PRCurve(
                    recall=tps / self.n_gt if self.n_gt else np.zeros(len(lab)),
                    precision=tps / np.maximum(tps + fps, 1),
                    score=np.asarray(scores, dtype=float)[order][kept],
                )
        return APResult(self.cls, lca_level, threshold if threshold is not None else threshold_cost,
                        ap, tp, len(labels) - tp - ign, ign, self.n_gt, curve)


def _bev_cost(det_centers: np.ndarray, gt_centers: np.ndarray):
    def cost(d_idx, g_idx):
        a = det_centers[d_idx][:, None, :]
        b = gt_centers[g_idx][None, :, :]
        return np.hypot(a[..., 0] - b[..., 0], a[..., 1] - b[..., 1])
    return cost


def _iou_cost(det_boxes, gt_boxes):
    def cost(d_idx, g_idx):
        return np.array([[-iou_2d(det_boxes[i], gt_boxes[g]) for g in g_idx] for i in d_idx]).reshape(
            len(d_idx), len(g_idx))
    return cost


def prepare_class_3d(dets: Sequence, gts: Sequence, cls: str, taxonomy: Taxonomy,
                     max_threshold: float) -> ClassProblem:
    """Build the center-distance matching problem for the class-``cls`` detections in ``dets``."""
    mine = [d for d in dets if d.cls == cls]
    gt_fine = [g for g in gts if taxonomy.is_fine(g.cls)]
    det_centers = np.array([d.box.center[:2] for d in mine], dtype=float).reshape(-1, 2)
    gt_centers = np.array([g.box.center[:2] for g in gt_fine], dtype=float).reshape(-1, 2)
    return ClassProblem(cls, [d.frame_id for d in mine], [g.frame_id for g in gt_fine],
                        [g.cls for g in gt_fine], _bev_cost(det_centers, gt_centers),
                        max_threshold, taxonomy)


def prepare_class_2d(dets: Sequence, gts: Sequence, cls: str, taxonomy: Taxonomy,
                     min_iou: float) -> ClassProblem:
    mine = [d for d in dets if d.cls == cls]
    gt_fine = [g for g in gts if taxonomy.is_fine(g.cls)]
    return ClassProblem(cls, [(d.frame_id, d.camera_id) for d in mine],
                        [(g.frame_id, g.camera_id) for g in gt_fine], [g.cls for g in gt_fine],
                        _iou_cost([d.box for d in mine], [g.box for g in gt_fine]), -min_iou, taxonomy)


def average_precision(dets, gts, cls: str, threshold: float, lca_level: int, taxonomy: Taxonomy,
                      nuscenes_clip: bool = False) -> APResult:
    """AP of one class at one center-distance threshold and LCA level."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    problem = prepare_class_3d(dets, gts, cls, taxonomy, threshold)
    scores = [d.score for d in dets if d.cls == cls]
    return problem.evaluate(scores, threshold, lca_level, nuscenes_clip, threshold)


def _mean(values: Iterable[Optional[float]]) -> Optional[float]:
    vals = [v for v in values if v is not None]
    return float(sum(vals) / len(vals)) if vals else None


@dataclass
class EvalReport:
    """Per-class AP per (LCA level, threshold), class means and group means."""

    results: list[APResult]
    class_ap: dict[int, dict[str, Optional[float]]]
    mean_ap: dict[int, Optional[float]]
    group_ap: dict[int, dict[str, Optional[float]]]
    groups: dict[str, str]
    config: dict

    @property
    def map(self) -> Optional[float]:
        return self.mean_ap.get(0)

    def group(self, name: str, lca_level: int = 0) -> Optional[float]:
        return self.group_ap[lca_level].get(name)

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "mAP": {str(k): v for k, v in self.mean_ap.items()},
            "group_mAP": {str(k): v for k, v in self.group_ap.items()},
            "class_AP": {str(k): v for k, v in self.class_ap.items()},
            "groups": self.groups,
            "results": [
                {"class": r.cls, "lca": r.lca_level, "threshold": r.threshold, "ap": r.ap,
                 "tp": r.tp, "fp": r.fp, "ignored": r.ignored, "n_gt": r.n_gt}
                for r in self.results
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["class", "group", "lca", "threshold", "ap"])
        for r in self.results:
            writer.writerow([r.cls, self.groups.get(r.cls, ""), r.lca_level, r.threshold,
                             "" if r.ap is None else repr(r.ap)])
        for level, per_class in self.class_ap.items():
            for cls, ap in per_class.items():
                writer.writerow([cls, self.groups.get(cls, ""), level, "mean",
                                 "" if ap is None else repr(ap)])
        return buf.getvalue()

    def pr_curves_csv(self, cls: str) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["lca", "threshold", "recall", "precision", "score"])
        for r in self.results:
            if r.cls != cls or r.curve is None:
                continue
            for rec, prec, s in zip(r.curve.recall, r.curve.precision, r.curve.score):
                writer.writerow([r.lca_level, r.threshold, repr(float(rec)), repr(float(prec)),
                                 repr(float(s))])
        return buf.getvalue()


def _assemble(results: list[APResult], taxonomy: Taxonomy, lca_levels, thresholds,
              zero_missing: bool, config: dict) -> EvalReport:
    groups = {c: g.value for c, g in group_by_cardinality(taxonomy).items()}
    class_ap: dict[int, dict[str, Optional[float]]] = {}
    for level in lca_levels:
        per_class = {}
        for cls in taxonomy.fine_classes:
            aps = [r.ap for r in results if r.cls == cls and r.lca_level == level]
            if any(a is None for a in aps):
                per_class[cls] = 0.0 if zero_missing else None
            else:
                per_class[cls] = float(sum(aps) / len(aps))
        class_ap[level] = per_class
    mean_ap = {lv: _mean(class_ap[lv].values()) for lv in lca_levels}
    group_ap = {
        lv: {name: _mean(ap for c, ap in class_ap[lv].items() if groups[c] == name)
             for name in ("Many", "Medium", "Few")}
        for lv in lca_levels
    }
    return EvalReport(results, class_ap, mean_ap, group_ap, groups, config)


def evaluate(dets, gts, taxonomy: Taxonomy, thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
             lca_levels: Sequence[int] = (0,), nuscenes_clip: bool = False,
             zero_missing: bool = False, keep_curves: bool = False,
             extra_config: Optional[dict] = None, workers: int = 1) -> EvalReport:
    """Center-distance AP for every fine class, threshold and requested LCA level.

    With ``workers > 1`` and a large input, classes are evaluated in worker
    processes; results are merged in taxonomy order, so output is identical.
    """
    thresholds = tuple(float(t) for t in thresholds)
    if not thresholds or min(thresholds) <= 0:
        raise ValueError("thresholds must be positive")
    for lv in lca_levels:
        if lv not in LCA_LEVELS:
            raise ValueError(f"lca level must be one of {LCA_LEVELS}")
    dets = [d for d in dets if taxonomy.is_fine(d.cls)]
    gts = list(gts)
    jobs = [(dets, gts, cls, taxonomy, thresholds, tuple(lca_levels), nuscenes_clip, keep_curves)
            for cls in taxonomy.fine_classes]
    if workers > 1 and len(jobs) > 1 and len(dets) + len(gts) >= PARALLEL_MIN_RECORDS:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            chunks = list(pool.map(_class_results, jobs))
    else:
        chunks = [_class_results(job) for job in jobs]
    results = [r for chunk in chunks for r in chunk]
    config = {"matching": "center_distance", "thresholds": list(thresholds),
              "lca_levels": list(lca_levels), "nuscenes_clip": nuscenes_clip,
              "zero_missing": zero_missing}
    config.update(extra_config or {})
    return _assemble(results, taxonomy, tuple(lca_levels), thresholds, zero_missing, config)


def _class_results(job) -> list[APResult]:
    dets, gts, cls, taxonomy, thresholds, lca_levels, nuscenes_clip, keep_curves = job
    problem = prepare_class_3d(dets, gts, cls, taxonomy, max(thresholds))
    scores = [d.score for d in dets if d.cls == cls]
    return [problem.evaluate(scores, th, lv, nuscenes_clip, th, keep_curves)
            for lv in lca_levels for th in thresholds]


def mean_average_precision(dets, gts, taxonomy: Taxonomy,
                           thresholds: Sequence[float] = DEFAULT_THRESHOLDS, **kw) -> EvalReport:
    """Standard mAP (LCA=0) averaged over distance thresholds."""
    return evaluate(dets, gts, taxonomy, thresholds, lca_levels=(0,), **kw)


def map_hierarchical(dets, gts, taxonomy: Taxonomy,
                     thresholds: Sequence[float] = DEFAULT_THRESHOLDS, **kw) -> EvalReport:
    """mAP_H: the mAP computation at LCA levels 0, 1 and 2."""
    return evaluate(dets, gts, taxonomy, thresholds, lca_levels=LCA_LEVELS, **kw)


def _in_range(x: float, y: float, lo: float, hi: float) -> bool:
    r = math.hypot(x, y)
    return lo <= r < hi


def range_filtered_eval(dets, gts, taxonomy: Taxonomy, range_m: tuple[float, float],
                        thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
                        lca_levels: Sequence[int] = (0,), **kw) -> EvalReport:
    """Evaluate only records whose BEV distance from the ego origin lies in ``[lo, hi)``."""
    lo, hi = (float(v) for v in range_m)
    if not lo < hi:
        raise ValueError("range must satisfy min < max")
    dets = [d for d in dets if _in_range(d.box.center[0], d.box.center[1], lo, hi)]
    gts = [g for g in gts if _in_range(g.box.center[0], g.box.center[1], lo, hi)]
    extra = dict(kw.pop("extra_config", None) or {})
    extra["range_m"] = [lo, hi if math.isfinite(hi) else "inf"]
    return evaluate(dets, gts, taxonomy, thresholds, lca_levels, extra_config=extra, **kw)


def eval_2d(dets2d, gt2d, taxonomy: Taxonomy, iou_thresholds: Sequence[float] = (0.5,),
            lca_levels: Sequence[int] = (0,), nuscenes_clip: bool = False,
            zero_missing: bool = False, keep_curves: bool = False) -> EvalReport:
    """Image-plane AP: a match requires ``iou_2d >= threshold`` within the same frame and camera."""
    iou_thresholds = tuple(float(t) for t in iou_thresholds)
    if not iou_thresholds or not all(0 < t <= 1 for t in iou_thresholds):
        raise ValueError("IoU thresholds must lie in (0, 1]")
    dets2d = [d for d in dets2d if taxonomy.is_fine(d.cls)]
    gt2d = list(gt2d)
    results = []
    for cls in taxonomy.fine_classes:
        problem = prepare_class_2d(dets2d, gt2d, cls, taxonomy, min(iou_thresholds))
        scores = [d.score for d in dets2d if d.cls == cls]
        for lv in lca_levels:
            for th in iou_thresholds:
                results.append(problem.evaluate(scores, -th, lv, nuscenes_clip, th, keep_curves))
    config = {"matching": "iou_2d", "thresholds": list(iou_thresholds), "lca_levels": list(lca_levels),
              "nuscenes_clip": nuscenes_clip, "zero_missing": zero_missing}
    return _assemble(results, taxonomy, tuple(lca_levels), iou_thresholds, zero_missing, config)


@dataclass
class ConfusionMatrix:
    superclass: str
    classes: tuple[str, ...]
    counts: np.ndarray
    rates: np.ndarray

    def to_dict(self) -> dict:
        return {"superclass": self.superclass, "classes": list(self.classes),
                "counts": self.counts.astype(int).tolist(), "rates": self.rates.tolist()}


def confusion_matrix(dets, gts, taxonomy: Taxonomy, superclass: str, dist: float = 2.0) -> ConfusionMatrix:
    """Row ``i``: how class-``i`` predictions that land on ground truth of the superclass
    are distributed over the matched ground-truth classes. Unmatched predictions are ignored.
    """
    classes = tuple(members_of(taxonomy, superclass))
    index = {c: k for k, c in enumerate(classes)}
    gts = [g for g in gts if g.cls in index]
    counts = np.zeros((len(classes), len(classes)))
    for cls in classes:
        problem = ClassProblem(
            cls,
            [d.frame_id for d in dets if d.cls == cls],
            [g.frame_id for g in gts],
            # every superclass member counts as a "target" for this matching
            [cls] * len(gts),
            _bev_cost(np.array([d.box.center[:2] for d in dets if d.cls == cls], dtype=float).reshape(-1, 2),
                      np.array([g.box.center[:2] for g in gts], dtype=float).reshape(-1, 2)),
            dist, taxonomy,
        )
        mine = [d for d in dets if d.cls == cls]
        order = sorted(range(len(mine)), key=lambda i: (-mine[i].score, i))
        taken: set[int] = set()
        for i in order:
            for cost, g, _ in problem.cands[i]:
                if g not in taken:
                    taken.add(g)
                    counts[index[cls], index[gts[g].cls]] += 1
                    break
    totals = counts.sum(axis=1, keepdims=True)
    rates = np.divide(counts, totals, out=np.zeros_like(counts), where=totals > 0)
    return ConfusionMatrix(superclass, classes, counts, rates)


def average_recall(dets, gts, taxonomy: Taxonomy, threshold: float = 2.0, group_level: str = "fine",
                   visibility: Optional[str] = None,
                   range_m: Optional[tuple[float, float]] = None) -> dict[str, Optional[float]]:
    """Fraction of (filtered) ground truth with at least one detection of an accepted class
    within ``threshold``. Keys are fine or coarse class names.
    """
    if group_level not in ("fine", "coarse"):
        raise ValueError("group_level must be 'fine' or 'coarse'")

    def group_of(cls: str) -> str:
        return cls if group_level == "fine" else taxonomy.parent(cls)

    sel = [g for g in gts if taxonomy.is_fine(g.cls)]
    if visibility is not None:
        sel = [g for g in sel if g.visibility == visibility]
    if range_m is not None:
        sel = [g for g in sel if _in_range(g.box.center[0], g.box.center[1], *range_m)]
    det_frames: dict[str, list] = {}
    for d in dets:
        if taxonomy.is_fine(d.cls):
            det_frames.setdefault(d.frame_id, []).append(d)
    hits: dict[str, int] = {}
    totals: dict[str, int] = {}
    for g in sel:
        key = group_of(g.cls)
        totals[key] = totals.get(key, 0) + 1
        gx, gy = g.box.center[0], g.box.center[1]
        if any(group_of(d.cls) == key and math.hypot(d.box.center[0] - gx, d.box.center[1] - gy) <= threshold
               for d in det_frames.get(g.frame_id, ())):
            hits[key] = hits.get(key, 0) + 1
    names = taxonomy.fine_classes if group_level == "fine" else taxonomy.coarse_classes
    return {n: (hits.get(n, 0) / totals[n] if totals.get(n) else None) for n in names}
