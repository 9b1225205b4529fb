"""Detection / ground-truth records, frame grouping and JSONL serialization.

One JSON object per line. Field names per record kind:

* ``det3d``: frame_id, class, score, logit (optional), center [x,y,z],
  size [l,w,h], yaw, source
* ``det2d``: frame_id, camera_id, class, score, logit (optional), bbox [x1,y1,x2,y2]
* ``gt``:    frame_id, class, center, size, yaw, visibility (optional)
* ``gt2d``:  frame_id, camera_id, class, bbox
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace as _dc_replace
from typing import Generic, Iterable, Iterator, Optional, Sequence, TypeVar, Union

from .geometry import Box2D, Box3D, wrap_angle
from .taxonomy import Taxonomy

SOURCES = ("lidar", "rgb3d", "fused")
VISIBILITY_BUCKETS = ("0-40", "40-60", "60-80", "80-100")
KINDS = ("det3d", "det2d", "gt", "gt2d")

LOGIT_EPS = 1e-7


class RecordError(ValueError):
    """Malformed or invalid record; ``line`` is 1-based when known."""

    def __init__(self, message: str, path=None, line: Optional[int] = None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        elif line is not None:
            where = f"line {line}: "
        super().__init__(where + message)


def score_to_logit(score: float) -> float:
    s = min(max(score, LOGIT_EPS), 1.0 - LOGIT_EPS)
    return math.log(s / (1.0 - s))


def round_score(score: float) -> float:
    """Quantize a score to the 9 significant digits used on disk."""
    return float(f"{score:.9g}")


def _check_score(score: float) -> float:
    score = float(score)
    if not 0.0 <= score <= 1.0:
        raise ValueError(f"score must lie in [0, 1], got {score}")
    return score


@dataclass(frozen=True)
class Detection3D:
    frame_id: str
    box: Box3D
    cls: str
    score: float
    logit: Optional[float] = None
    source: str = "lidar"

    def __post_init__(self):
        if not self.frame_id:
            raise ValueError("frame_id must be non-empty")
        object.__setattr__(self, "score", _check_score(self.score))
        if self.source not in SOURCES:
            raise ValueError(f"source must be one of {SOURCES}, got {self.source!r}")

    @property
    def effective_logit(self) -> float:
        return self.logit if self.logit is not None else score_to_logit(self.score)

    def with_(self, **changes) -> "Detection3D":
        return _dc_replace(self, **changes)


@dataclass(frozen=True)
class Detection2D:
    frame_id: str
    camera_id: str
    box: Box2D
    cls: str
    score: float
    logit: Optional[float] = None

    def __post_init__(self):
        if not self.frame_id:
            raise ValueError("frame_id must be non-empty")
        object.__setattr__(self, "score", _check_score(self.score))

    @property
    def effective_logit(self) -> float:
        return self.logit if self.logit is not None else score_to_logit(self.score)


@dataclass(frozen=True)
class GroundTruth3D:
    frame_id: str
    box: Box3D
    cls: str
    visibility: Optional[str] = None

    def __post_init__(self):
        if not self.frame_id:
            raise ValueError("frame_id must be non-empty")
        if self.visibility is not None and self.visibility not in VISIBILITY_BUCKETS:
            raise ValueError(f"visibility must be one of {VISIBILITY_BUCKETS}")

    @property
    def ego_distance(self) -> float:
        return math.hypot(self.box.center[0], self.box.center[1])


@dataclass(frozen=True)
class GroundTruth2D:
    frame_id: str
    camera_id: str
    box: Box2D
    cls: str


Record = Union[Detection3D, Detection2D, GroundTruth3D, GroundTruth2D]
R = TypeVar("R", Detection3D, Detection2D, GroundTruth3D, GroundTruth2D)

_KIND_OF = {Detection3D: "det3d", Detection2D: "det2d", GroundTruth3D: "gt", GroundTruth2D: "gt2d"}


class RecordSet(Generic[R]):
    """Immutable, insertion-ordered collection of records of one kind."""

    def __init__(self, records: Iterable[R] = (), kind: Optional[str] = None):
        self.records: tuple[R, ...] = tuple(records)
        if kind is None:
            kinds = {_KIND_OF[type(r)] for r in self.records}
            if len(kinds) > 1:
                raise ValueError(f"mixed record kinds {sorted(kinds)}")
            kind = kinds.pop() if kinds else "det3d"
        if kind not in KINDS:
            raise ValueError(f"unknown kind {kind!r}")
        for r in self.records:
            if _KIND_OF[type(r)] != kind:
                raise ValueError(f"record of kind {_KIND_OF[type(r)]} in a {kind} set")
        self.kind = kind
        self._frames: Optional[dict[str, list[int]]] = None

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[R]:
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def __eq__(self, other) -> bool:
        if not isinstance(other, RecordSet):
            return NotImplemented
        return self.kind == other.kind and self.records == other.records

    def __repr__(self) -> str:
        return f"RecordSet(kind={self.kind!r}, n={len(self.records)})"

    def replace(self, records: Iterable[R]) -> "RecordSet[R]":
        return RecordSet(records, kind=self.kind)

    def frame_indices(self) -> dict[str, list[int]]:
        """Record indices grouped by frame_id, frames in first-seen order."""
        if self._frames is None:
            frames: dict[str, list[int]] = {}
            for i, r in enumerate(self.records):
                frames.setdefault(r.frame_id, []).append(i)
            self._frames = frames
        return self._frames

    def frame_ids(self) -> list[str]:
        return list(self.frame_indices())

    def by_frame(self) -> dict[str, list[R]]:
        return {f: [self.records[i] for i in idx] for f, idx in self.frame_indices().items()}

    def of_frame(self, frame_id: str) -> list[R]:
        return [self.records[i] for i in self.frame_indices().get(frame_id, [])]

    def classes(self) -> set[str]:
        return {r.cls for r in self.records}

    def bind(self, taxonomy: Taxonomy) -> "RecordSet[R]":
        """Validate every class against ``taxonomy``; GT classes must be fine."""
        strict = self.kind in ("gt", "gt2d")
        for i, r in enumerate(self.records):
            ok = taxonomy.is_fine(r.cls) if strict else taxonomy.is_known(r.cls)
            if not ok:
                raise RecordError(f"class {r.cls!r} not in taxonomy", line=i + 1)
        return self


DetectionSet = RecordSet
GroundTruthSet = RecordSet


def _num_list(obj, key, n):
    value = obj[key]
    if not isinstance(value, list) or len(value) != n:
        raise ValueError(f"{key} must be a list of {n} numbers")
    return [float(v) for v in value]


def record_from_dict(obj: dict, kind: str) -> Record:
    if not isinstance(obj, dict):
        raise ValueError("record must be a JSON object")
    try:
        if kind in ("det3d", "gt"):
            center = _num_list(obj, "center", 3)
            l, w, h = _num_list(obj, "size", 3)
            box = Box3D(tuple(center), l, w, h, float(obj["yaw"]))
            if kind == "det3d":
                logit = obj.get("logit")
                return Detection3D(str(obj["frame_id"]), box, str(obj["class"]), obj["score"],
                                   None if logit is None else float(logit), obj.get("source", "lidar"))
            return GroundTruth3D(str(obj["frame_id"]), box, str(obj["class"]), obj.get("visibility"))
        box2 = Box2D(*_num_list(obj, "bbox", 4))
        if kind == "det2d":
            logit = obj.get("logit")
            return Detection2D(str(obj["frame_id"]), str(obj["camera_id"]), box2, str(obj["class"]),
                               obj["score"], None if logit is None else float(logit))
        if kind == "gt2d":
            return GroundTruth2D(str(obj["frame_id"]), str(obj["camera_id"]), box2, str(obj["class"]))
    except KeyError as exc:
        raise ValueError(f"missing field {exc}") from None
    except TypeError as exc:
        raise ValueError(str(exc)) from None
    raise ValueError(f"unknown kind {kind!r}")


def record_to_dict(r: Record) -> dict:
    if isinstance(r, Detection3D):
        out = {"frame_id": r.frame_id, "class": r.cls, "score": round_score(r.score)}
        if r.logit is not None:
            out["logit"] = r.logit
        out.update(center=list(r.box.center), size=list(r.box.size), yaw=r.box.yaw, source=r.source)
        return out
    if isinstance(r, Detection2D):
        out = {"frame_id": r.frame_id, "camera_id": r.camera_id, "class": r.cls,
               "score": round_score(r.score)}
        if r.logit is not None:
            out["logit"] = r.logit
        out["bbox"] = r.box.as_list()
        return out
    if isinstance(r, GroundTruth3D):
        out = {"frame_id": r.frame_id, "class": r.cls, "center": list(r.box.center),
               "size": list(r.box.size), "yaw": r.box.yaw}
        if r.visibility is not None:
            out["visibility"] = r.visibility
        return out
    if isinstance(r, GroundTruth2D):
        return {"frame_id": r.frame_id, "camera_id": r.camera_id, "class": r.cls,
                "bbox": r.box.as_list()}
    raise TypeError(f"not a record: {type(r).__name__}")


def load_detections(path, kind: str, taxonomy: Optional[Taxonomy] = None) -> RecordSet:
    """Parse a JSONL file of ``kind`` records; errors carry the 1-based line number."""
    if kind not in KINDS:
        raise ValueError(f"unknown kind {kind!r}")
    records = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise RecordError(f"malformed JSON ({exc.msg})", path, lineno) from None
            try:
                records.append(record_from_dict(obj, kind))
            except ValueError as exc:
                raise RecordError(str(exc), path, lineno) from None
            if taxonomy is not None:
                cls = records[-1].cls
                ok = taxonomy.is_fine(cls) if kind in ("gt", "gt2d") else taxonomy.is_known(cls)
                if not ok:
                    raise RecordError(f"class {cls!r} not in taxonomy", path, lineno)
    return RecordSet(records, kind=kind)


def dumps_records(records: Iterable[Record]) -> str:
    return "".join(json.dumps(record_to_dict(r)) + "\n" for r in records)


def save_detections(dets: Union[RecordSet, Sequence[Record]], path) -> None:
    text = dumps_records(dets)
    try:
        with open(path, "w") as f:
            f.write(text)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from exc


def quaternion_to_yaw(q: Sequence[float]) -> float:
    """Heading about +z of a ``[w, x, y, z]`` quaternion, wrapped to (-pi, pi]."""
    w, x, y, z = (float(v) for v in q)
    return wrap_angle(math.atan2(2.0 * (w * z + x * y), 1.0 - 2.0 * (y * y + z * z)))


def import_nuscenes_results(path) -> RecordSet:
    """Convert a nuScenes-format results JSON into a det3d set.

    nuScenes stores ``size`` as (w, l, h); it is reordered to (l, w, h).
    """
    with open(path) as f:
        data = json.load(f)
    if "results" not in data or not isinstance(data["results"], dict):
        raise RecordError("missing 'results' mapping", path)
    records = []
    for token, boxes in data["results"].items():
        for i, b in enumerate(boxes):
            try:
                w, l, h = (float(v) for v in b["size"])
                box = Box3D(tuple(float(v) for v in b["translation"]), l, w, h,
                            quaternion_to_yaw(b["rotation"]))
                records.append(Detection3D(str(b.get("sample_token", token)), box,
                                           str(b["detection_name"]), float(b["detection_score"])))
            except KeyError as exc:
                raise RecordError(f"sample {token} box {i}: missing field {exc}", path) from None
            except ValueError as exc:
                raise RecordError(f"sample {token} box {i}: {exc}", path) from None
    return RecordSet(records, kind="det3d")
