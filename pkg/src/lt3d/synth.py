"""Seeded synthetic scenes and detector simulators.

Random streams: every frame of every operation draws from its own generator
``numpy.random.default_rng([seed, stream, frame_index])`` (stream 0: scene,
1: LiDAR detector, 2: RGB detector), so frames can be generated in any order
or in parallel and still reproduce bit-for-bit.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .detections import (VISIBILITY_BUCKETS, Detection2D, Detection3D, GroundTruth3D, RecordSet,
                          round_score)
from .geometry import (Box2D, Box3D, Camera, CameraIntrinsics, camera_from_dict, camera_to_dict,
                       look_at_pose, project_box3d_to_image, wrap_angle)
from .taxonomy import Taxonomy

STREAM_SCENE, STREAM_LIDAR, STREAM_RGB = 0, 1, 2
MIN_EGO_DISTANCE = 2.0
PLACEMENT_TRIES = 50


def _sigmoid(z: float) -> float:
    return 1.0 / (1.0 + math.exp(-z)) if z >= 0 else math.exp(z) / (1.0 + math.exp(z))


@dataclass(frozen=True)
class LidarSimConfig:
    # (max_distance_m, recall) steps; beyond the last step recall is 0
    recall_by_range: tuple[tuple[float, float], ...] = ((math.inf, 1.0),)
    loc_sigma: float = 0.0
    confusion: Mapping[str, Mapping[str, float]] = field(default_factory=dict)
    underconfidence_temperature: float = 1.0
    logit_mean_correct: float = 2.0
    logit_mean_confused: float = 1.0
    logit_mean_fp: float = -1.0
    logit_std: float = 1.0
    false_positives_per_frame: float = 0.0

    def recall_at(self, distance: float) -> float:
        for max_d, recall in self.recall_by_range:
            if distance < max_d:
                return recall
        return 0.0


@dataclass(frozen=True)
class RgbSimConfig:
    accuracy: float = 1.0
    jitter_px: float = 0.0
    recall: Mapping[str, float] = field(default_factory=dict)
    default_recall: float = 1.0
    logit_mean_correct: float = 2.5
    logit_mean_wrong: float = 1.0
    logit_mean_fp: float = -1.0
    logit_std: float = 1.0
    false_positives_per_image: float = 0.0

    def recall_of(self, cls: str) -> float:
        return self.recall.get(cls, self.default_recall)


@dataclass(frozen=True)
class ScenarioConfig:
    taxonomy: Taxonomy
    spawn_rates: Mapping[str, float]
    dimensions: Mapping[str, tuple[float, float, float]]
    seed: int = 0
    n_frames: int = 10
    extent_m: float = 40.0
    lidar: LidarSimConfig = LidarSimConfig()
    rgb: RgbSimConfig = RgbSimConfig()
    cameras: tuple[Camera, ...] = ()

    def __post_init__(self):
        fine = set(self.taxonomy.fine_classes)
        for name, rate in self.spawn_rates.items():
            if name not in fine:
                raise ValueError(f"spawn rate for unknown class {name!r}")
            if rate < 0:
                raise ValueError(f"spawn rate for {name!r} must be non-negative")
        for name in self.spawn_rates:
            if self.spawn_rates[name] > 0 and name not in self.dimensions:
                raise ValueError(f"no dimensions for class {name!r}")
        if self.lidar.loc_sigma < 0 or self.rgb.jitter_px < 0:
            raise ValueError("noise levels must be non-negative")
        for src, row in self.lidar.confusion.items():
            if src not in fine or any(dst not in fine for dst in row):
                raise ValueError(f"confusion row {src!r} references unknown classes")
            if any(p < 0 for p in row.values()) or abs(sum(row.values()) - 1.0) > 1e-9:
                raise ValueError(f"confusion row {src!r} must be a probability distribution")
        if not self.cameras:
            object.__setattr__(self, "cameras", tuple(default_rig()))

    @classmethod
    def from_dict(cls, obj: dict, base_dir: Optional[Path] = None) -> "ScenarioConfig":
        tax = obj["taxonomy"]
        if isinstance(tax, str):
            tax = json.loads(((base_dir or Path(".")) / tax).read_text())
        lidar = dict(obj.get("lidar", {}))
        if "recall_by_range" in lidar:
            lidar["recall_by_range"] = tuple(
                (math.inf if d is None else float(d), float(r)) for d, r in lidar["recall_by_range"])
        rig = obj.get("cameras")
        cameras = tuple(camera_from_dict(c) for c in rig) if rig else ()
        return cls(
            taxonomy=Taxonomy.from_dict(tax),
            spawn_rates={k: float(v) for k, v in obj["spawn_rates"].items()},
            dimensions={k: tuple(float(x) for x in v) for k, v in obj["dimensions"].items()},
            seed=int(obj.get("seed", 0)),
            n_frames=int(obj.get("n_frames", 10)),
            extent_m=float(obj.get("extent_m", 40.0)),
            lidar=LidarSimConfig(**lidar),
            rgb=RgbSimConfig(**obj.get("rgb", {})),
            cameras=cameras,
        )

    @classmethod
    def load(cls, path) -> "ScenarioConfig":
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text()), path.parent)

    def to_dict(self) -> dict:
        lidar = dict(self.lidar.__dict__)
        lidar["recall_by_range"] = [[None if math.isinf(d) else d, r] for d, r in self.lidar.recall_by_range]
        lidar["confusion"] = {k: dict(v) for k, v in self.lidar.confusion.items()}
        rgb = dict(self.rgb.__dict__)
        rgb["recall"] = dict(self.rgb.recall)
        return {
            "seed": self.seed, "n_frames": self.n_frames, "extent_m": self.extent_m,
            "taxonomy": self.taxonomy.to_dict(),
            "spawn_rates": dict(self.spawn_rates),
            "dimensions": {k: list(v) for k, v in self.dimensions.items()},
            "lidar": lidar, "rgb": rgb,
            "cameras": [camera_to_dict(c) for c in self.cameras],
        }

    def with_(self, **changes) -> "ScenarioConfig":
        from dataclasses import replace
        return replace(self, **changes)


def default_rig(n_cameras: int = 6, width: int = 1600, height: int = 900, fov_deg: float = 70.0,
                mount_height: float = 1.6) -> list[Camera]:
    """Surround-view rig of ``n_cameras`` evenly spaced horizontal cameras at the ego origin."""
    fx = (width / 2.0) / math.tan(math.radians(fov_deg) / 2.0)
    k = CameraIntrinsics(fx, fx, width / 2.0, height / 2.0, width, height)
    cams = []
    for i in range(n_cameras):
        yaw = wrap_angle(2.0 * math.pi * i / n_cameras)
        cams.append(Camera(f"cam{i}", k, look_at_pose((0.0, 0.0, mount_height), yaw)))
    return cams


def _rng(seed: int, stream: int, frame_index: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream, frame_index])


def frame_id(index: int) -> str:
    return f"frame-{index:06d}"


def _frame_index(fid: str) -> int:
    return int(fid.rsplit("-", 1)[1])


def generate_scene(cfg: ScenarioConfig) -> RecordSet:
    """Poisson class counts per frame, boxes uniform over the square extent (ego area excluded)."""
    classes = [c for c in cfg.taxonomy.fine_classes if cfg.spawn_rates.get(c, 0.0) > 0]
    records = []
    for k in range(cfg.n_frames):
        rng = _rng(cfg.seed, STREAM_SCENE, k)
        placed: list[tuple[float, float, float]] = []
        for cls in classes:
            l, w, h = cfg.dimensions[cls]
            radius = 0.5 * math.hypot(l, w)
            for _ in range(int(rng.poisson(cfg.spawn_rates[cls]))):
                for _ in range(PLACEMENT_TRIES):
                    x, y = rng.uniform(-cfg.extent_m, cfg.extent_m, size=2)
                    if math.hypot(x, y) < MIN_EGO_DISTANCE + radius:
                        continue
                    if all(math.hypot(x - px, y - py) > radius + pr for px, py, pr in placed):
                        break
                placed.append((x, y, radius))
                yaw = wrap_angle(float(rng.uniform(-math.pi, math.pi)))
                vis = VISIBILITY_BUCKETS[int(rng.integers(len(VISIBILITY_BUCKETS)))]
                box = Box3D((float(x), float(y), h / 2.0), l, w, h, yaw)
                records.append(GroundTruth3D(frame_id(k), box, cls, vis))
    return RecordSet(records, kind="gt")


def _frames(records, n_frames: int) -> list[list]:
    out: list[list] = [[] for _ in range(n_frames)]
    for r in records:
        out[_frame_index(r.frame_id)].append(r)
    return out


def _sample_class(rng, row: Mapping[str, float], default: str) -> str:
    if not row:
        return default
    names = list(row)
    return names[int(rng.choice(len(names), p=np.array([row[n] for n in names])))]


def simulate_lidar_detector(gt, cfg: ScenarioConfig) -> RecordSet:
    """Recall by range, Gaussian center jitter, class resampled from the confusion kernel,
    and under-confident logits: ``sigmoid(logit * temperature)`` is the intended confidence.
    """
    sim = cfg.lidar
    fp_classes = [c for c in cfg.taxonomy.fine_classes if cfg.spawn_rates.get(c, 0.0) > 0]
    fp_weights = np.array([cfg.spawn_rates[c] for c in fp_classes], dtype=float)
    records = []
    for k, frame_gt in enumerate(_frames(gt, cfg.n_frames)):
        rng = _rng(cfg.seed, STREAM_LIDAR, k)
        fid = frame_id(k)
        for g in frame_gt:
            keep = rng.random() < sim.recall_at(g.ego_distance)
            noise = rng.normal(0.0, sim.loc_sigma, size=3) if sim.loc_sigma > 0 else np.zeros(3)
            cls = _sample_class(rng, sim.confusion.get(g.cls, {}), g.cls)
            mean = sim.logit_mean_correct if cls == g.cls else sim.logit_mean_confused
            z = float(rng.normal(mean, sim.logit_std))
            if not keep:
                continue
            x, y, zc = g.box.center
            box = Box3D((x + float(noise[0]), y + float(noise[1]), zc + float(noise[2])),
                        g.box.length, g.box.width, g.box.height, g.box.yaw)
            logit = z / sim.underconfidence_temperature
            records.append(Detection3D(fid, box, cls, round_score(_sigmoid(logit)), logit, "lidar"))
        if sim.false_positives_per_frame > 0 and len(fp_classes):
            for _ in range(int(rng.poisson(sim.false_positives_per_frame))):
                cls = fp_classes[int(rng.choice(len(fp_classes), p=fp_weights / fp_weights.sum()))]
                l, w, h = cfg.dimensions[cls]
                x, y = (float(v) for v in rng.uniform(-cfg.extent_m, cfg.extent_m, size=2))
                yaw = wrap_angle(float(rng.uniform(-math.pi, math.pi)))
                logit = float(rng.normal(sim.logit_mean_fp, sim.logit_std)) / sim.underconfidence_temperature
                records.append(Detection3D(fid, Box3D((x, y, h / 2.0), l, w, h, yaw), cls,
                                           round_score(_sigmoid(logit)), logit, "lidar"))
    return RecordSet(records, kind="det3d")


def _jitter_box(rng, box: Box2D, sigma: float, k: CameraIntrinsics) -> Optional[Box2D]:
    if sigma <= 0:
        return box
    x1, y1, x2, y2 = (c + float(n) for c, n in zip(box.as_list(), rng.normal(0.0, sigma, size=4)))
    x1, x2 = max(min(x1, x2), 0.0), min(max(x1, x2), float(k.width))
    y1, y2 = max(min(y1, y2), 0.0), min(max(y1, y2), float(k.height))
    if not (x1 < x2 and y1 < y2):
        return None
    return Box2D(x1, y1, x2, y2)


def simulate_rgb_detector(gt, cameras: Sequence[Camera], cfg: ScenarioConfig) -> RecordSet:
    """Per object: detected with the class recall, labelled correctly with ``accuracy``
    (otherwise a random sibling class), then emitted in every camera it projects into
    with independent pixel jitter. No depth is produced.
    """
    sim = cfg.rgb
    tax = cfg.taxonomy
    fine = list(tax.fine_classes)
    records = []
    for k, frame_gt in enumerate(_frames(gt, cfg.n_frames)):
        rng = _rng(cfg.seed, STREAM_RGB, k)
        fid = frame_id(k)
        for g in frame_gt:
            detected = rng.random() < sim.recall_of(g.cls)
            correct = rng.random() < sim.accuracy
            siblings = [c for c in tax.children[tax.parent(g.cls)] if c != g.cls]
            wrong = siblings[int(rng.integers(len(siblings)))] if siblings else g.cls
            cls = g.cls if correct or not siblings else wrong
            mean = sim.logit_mean_correct if cls == g.cls else sim.logit_mean_wrong
            logit = float(rng.normal(mean, sim.logit_std))
            if not detected:
                continue
            for cam in cameras:
                box = project_box3d_to_image(g.box, cam.pose, cam.intrinsics)
                if box is None:
                    continue
                box = _jitter_box(rng, box, sim.jitter_px, cam.intrinsics)
                if box is not None:
                    records.append(Detection2D(fid, cam.camera_id, box, cls, round_score(_sigmoid(logit)), logit))
        if sim.false_positives_per_image > 0:
            for cam in cameras:
                kin = cam.intrinsics
                for _ in range(int(rng.poisson(sim.false_positives_per_image))):
                    cx, cy = rng.uniform(0, kin.width), rng.uniform(0, kin.height)
                    bw, bh = rng.uniform(10, 200), rng.uniform(10, 200)
                    x1, y1 = max(cx - bw / 2, 0.0), max(cy - bh / 2, 0.0)
                    x2, y2 = min(cx + bw / 2, float(kin.width)), min(cy + bh / 2, float(kin.height))
                    cls = fine[int(rng.integers(len(fine)))]
                    logit = float(rng.normal(sim.logit_mean_fp, sim.logit_std))
                    records.append(Detection2D(fid, cam.camera_id, Box2D(x1, y1, x2, y2), cls,
                                               round_score(_sigmoid(logit)), logit))
    return RecordSet(records, kind="det2d")


def simulate(cfg: ScenarioConfig) -> tuple[RecordSet, RecordSet, RecordSet]:
    gt = generate_scene(cfg)
    return gt, simulate_lidar_detector(gt, cfg), simulate_rgb_detector(gt, cfg.cameras, cfg)
