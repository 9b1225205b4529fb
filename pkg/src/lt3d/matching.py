"""Correspondence procedures.

All matchers here are greedy (never optimal assignment) and deterministic:
ties are broken by ascending input index.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

from .detections import Detection2D, Detection3D
from .geometry import Box2D, Box3D, bev_center_distance, iou_2d


@dataclass(frozen=True)
class MatchResult:
    pairs: tuple[tuple[int, int], ...] = ()
    unmatched_detections: tuple[int, ...] = ()
    unmatched_targets: tuple[int, ...] = ()

    def canonical(self) -> "MatchResult":
        return MatchResult(tuple(sorted(self.pairs)), tuple(sorted(self.unmatched_detections)),
                           tuple(sorted(self.unmatched_targets)))

    def partner_of(self) -> dict[int, int]:
        return dict(self.pairs)


def _result(pairs, n_det: int, n_tgt: int, det_ids: Optional[Sequence[int]] = None) -> MatchResult:
    matched_d = {d for d, _ in pairs}
    matched_t = {t for _, t in pairs}
    det_ids = range(n_det) if det_ids is None else det_ids
    return MatchResult(
        tuple(pairs),
        tuple(d for d in det_ids if d not in matched_d),
        tuple(t for t in range(n_tgt) if t not in matched_t),
    )


def greedy_match_eval(dets: Sequence[tuple[float, Box3D]], gts: Sequence[Box3D],
                      threshold: float) -> MatchResult:
    """Score-ordered greedy matching on BEV center distance.

    Detections are visited by descending score (ties: lower index first); each
    takes the nearest unmatched ground truth with distance <= ``threshold``.
    """
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][0], i))
    taken = [False] * len(gts)
    pairs = []
    for i in order:
        box = dets[i][1]
        best, best_d = -1, threshold
        for j, g in enumerate(gts):
            if taken[j]:
                continue
            d = bev_center_distance(box, g)
            if d < best_d or (d == best_d and best < 0):
                best, best_d = j, d
        if best >= 0:
            taken[best] = True
            pairs.append((i, best))
    return _result(pairs, len(dets), len(gts))


class ProjectedBox(NamedTuple):
    det_index: int
    camera_id: str
    box: Box2D


def match_cross_modal_2d(lidar_proj: Sequence[ProjectedBox], rgb: Sequence[Detection2D],
                         iou_threshold: float, n_lidar: Optional[int] = None) -> MatchResult:
    """Greedy one-to-one matching of projected LiDAR boxes to RGB boxes by IoU.

    Only same-camera pairs with IoU strictly above ``iou_threshold`` are
    candidates; they are accepted in descending IoU order (ties: ascending
    (det_index, rgb index)). A LiDAR detection projected into several cameras
    contributes one candidate per camera but is matched at most once. Class
    labels are ignored. Pairs are ``(det_index, rgb index)``.
    """
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError("iou_threshold must lie in (0, 1)")
    by_cam: dict[str, list[int]] = {}
    for j, r in enumerate(rgb):
        by_cam.setdefault(r.camera_id, []).append(j)
    cands = []
    for p in lidar_proj:
        for j in by_cam.get(p.camera_id, ()):
            iou = iou_2d(p.box, rgb[j].box)
            if iou > iou_threshold:
                cands.append((-iou, p.det_index, j))
    cands.sort()
    used_l, used_r, pairs = set(), set(), []
    for _, i, j in cands:
        if i in used_l or j in used_r:
            continue
        used_l.add(i)
        used_r.add(j)
        pairs.append((i, j))
    if n_lidar is None:
        det_ids = sorted({p.det_index for p in lidar_proj})
    else:
        det_ids = range(n_lidar)
    return _result(pairs, 0, len(rgb), det_ids)


def match_cross_modal_3d(lidar: Sequence[Detection3D], rgb3d: Sequence[Detection3D],
                         radius_m: float, class_aware: bool = True) -> MatchResult:
    """Radius predicate: a LiDAR detection matches if any RGB 3D detection lies within ``radius_m``.

    Many-to-one is allowed; each matched LiDAR index is paired with its nearest
    qualifying RGB detection (lowest index on ties).
    """
    if radius_m <= 0:
        raise ValueError("radius_m must be positive")
    pairs = []
    for i, d in enumerate(lidar):
        best, best_d = -1, radius_m
        for j, r in enumerate(rgb3d):
            if class_aware and r.cls != d.cls:
                continue
            dist = bev_center_distance(d.box, r.box)
            if dist < best_d or (dist == best_d and best < 0):
                best, best_d = j, dist
        if best >= 0:
            pairs.append((i, best))
    matched_t = {t for _, t in pairs}
    return MatchResult(
        tuple(pairs),
        tuple(i for i in range(len(lidar)) if i not in {p[0] for p in pairs}),
        tuple(j for j in range(len(rgb3d)) if j not in matched_t),
    )
