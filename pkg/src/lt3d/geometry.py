"""Boxes, rigid transforms, pinhole projection and overlap primitives.

Conventions
-----------
* Ego frame: x forward, y left, z up. Yaw is measured counter-clockwise
  about +z starting from +x, wrapped to (-pi, pi].
* ``Box3D.center`` is the geometric center of the cuboid.
* Camera frame: x right, y down, z forward (optical axis).
* A camera ``Pose`` maps ego coordinates into the camera frame:
  ``p_cam = rotation @ p_ego + translation``.

Corner order of :func:`corners_of_box3d` (box-local, before yaw)::

        7 -------- 6           index  (dx,    dy,    dz)
       /|         /|           0      (+l/2, +w/2, -h/2)
      4 -------- 5 .           1      (-l/2, +w/2, -h/2)
      | 3 -------| 2           2      (-l/2, -w/2, -h/2)
      |/         |/            3      (+l/2, -w/2, -h/2)
      0 -------- 1             4..7   same footprint at +h/2

i.e. the bottom face counter-clockwise (seen from above) from the +l/+w
corner, then the top face in the same order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

SO3_TOL = 1e-9

Vec3 = tuple[float, float, float]


def wrap_angle(theta: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    wrapped = math.fmod(theta, 2.0 * math.pi)
    if wrapped <= -math.pi:
        wrapped += 2.0 * math.pi
    elif wrapped > math.pi:
        wrapped -= 2.0 * math.pi
    return wrapped


def _check_finite(name: str, values: Iterable[float]) -> None:
    if not all(math.isfinite(v) for v in values):
        raise ValueError(f"{name} must be finite, got {tuple(values)}")


@dataclass(frozen=True)
class Box3D:
    center: Vec3
    length: float
    width: float
    height: float
    yaw: float = 0.0

    def __post_init__(self):
        center = tuple(float(v) for v in self.center)
        if len(center) != 3:
            raise ValueError(f"center must have 3 components, got {len(center)}")
        _check_finite("center", center)
        object.__setattr__(self, "center", center)
        for name in ("length", "width", "height"):
            value = float(getattr(self, name))
            if not (value > 0 and math.isfinite(value)):
                raise ValueError(f"{name} must be positive, got {value}")
            object.__setattr__(self, name, value)
        yaw = float(self.yaw)
        if not (-math.pi < yaw <= math.pi):
            raise ValueError(f"yaw must lie in (-pi, pi], got {yaw}")
        object.__setattr__(self, "yaw", yaw)

    @property
    def size(self) -> Vec3:
        return (self.length, self.width, self.height)

    def translated(self, dx: float = 0.0, dy: float = 0.0, dz: float = 0.0) -> "Box3D":
        x, y, z = self.center
        return Box3D((x + dx, y + dy, z + dz), self.length, self.width, self.height, self.yaw)


@dataclass(frozen=True)
class Box2D:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = tuple(float(v) for v in (self.x1, self.y1, self.x2, self.y2))
        _check_finite("Box2D", coords)
        if not (coords[0] < coords[2] and coords[1] < coords[3]):
            raise ValueError(f"Box2D requires x1 < x2 and y1 < y2, got {coords}")
        for name, value in zip(("x1", "y1", "x2", "y2"), coords):
            object.__setattr__(self, name, value)

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]


@dataclass(frozen=True)
class Pose:
    """Rigid transform ``p_out = rotation @ p_in + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.array(self.rotation, dtype=float).reshape(3, 3)
        trans = np.array(self.translation, dtype=float).reshape(3)
        if not (np.all(np.isfinite(rot)) and np.all(np.isfinite(trans))):
            raise ValueError("pose must be finite")
        if not is_rotation(rot):
            raise ValueError("rotation is not in SO(3) within tolerance")
        rot.setflags(write=False)
        trans.setflags(write=False)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform an ``(N, 3)`` array of points."""
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return bool(
            np.array_equal(self.rotation, other.rotation)
            and np.array_equal(self.translation, other.translation)
        )

    __hash__ = None


def is_rotation(rot: np.ndarray, tol: float = SO3_TOL) -> bool:
    rot = np.asarray(rot, dtype=float)
    if rot.shape != (3, 3):
        return False
    ortho = np.max(np.abs(rot @ rot.T - np.eye(3)))
    return bool(ortho <= tol and abs(np.linalg.det(rot) - 1.0) <= tol)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if int(self.width) != self.width or int(self.height) != self.height:
            raise ValueError("image width/height must be integers")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image width/height must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError("principal point must lie inside the image")
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))


@dataclass(frozen=True)
class Camera:
    camera_id: str
    intrinsics: CameraIntrinsics
    pose: Pose = field(default_factory=Pose.identity)


def bev_center_distance(a: Box3D, b: Box3D) -> float:
    """Ground-plane distance between box centers (z ignored)."""
    return math.hypot(a.center[0] - b.center[0], a.center[1] - b.center[1])


def _local_corners(length: float, width: float, height: float) -> np.ndarray:
    l2, w2, h2 = length / 2.0, width / 2.0, height / 2.0
    footprint = np.array([[l2, w2], [-l2, w2], [-l2, -w2], [l2, -w2]])
    bottom = np.column_stack([footprint, np.full(4, -h2)])
    top = np.column_stack([footprint, np.full(4, h2)])
    return np.vstack([bottom, top])


def yaw_matrix(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def corners_of_box3d(b: Box3D) -> np.ndarray:
    """Return the ``(8, 3)`` corner array in the canonical order (see module docstring)."""
    return _local_corners(b.length, b.width, b.height) @ yaw_matrix(b.yaw).T + np.asarray(b.center)


def bev_footprint_aabb(b: Box3D) -> tuple[float, float, float, float]:
    """Axis-aligned ground-plane hull of the rotated footprint as (xmin, ymin, xmax, ymax)."""
    c, s = abs(math.cos(b.yaw)), abs(math.sin(b.yaw))
    half_x = (b.length * c + b.width * s) / 2.0
    half_y = (b.length * s + b.width * c) / 2.0
    x, y, _ = b.center
    return (x - half_x, y - half_y, x + half_x, y + half_y)


def project_points(points_cam: np.ndarray, k: CameraIntrinsics) -> np.ndarray:
    """Pinhole projection of camera-frame points with positive depth."""
    z = points_cam[:, 2]
    u = k.fx * points_cam[:, 0] / z + k.cx
    v = k.fy * points_cam[:, 1] / z + k.cy
    return np.column_stack([u, v])


def project_box3d_to_image(b: Box3D, cam_pose: Pose, k: CameraIntrinsics) -> Optional[Box2D]:
    """Image-plane hull of a 3D box, clipped to the image.

    Corners with non-positive depth are dropped. Returns ``None`` when fewer
    than two corners are in front of the camera or the clipped hull is empty.
    """
    pts = cam_pose.apply(corners_of_box3d(b))
    front = pts[pts[:, 2] > 0]
    if len(front) < 2:
        return None
    uv = project_points(front, k)
    x1 = max(float(uv[:, 0].min()), 0.0)
    y1 = max(float(uv[:, 1].min()), 0.0)
    x2 = min(float(uv[:, 0].max()), float(k.width))
    y2 = min(float(uv[:, 1].max()), float(k.height))
    if not (x1 < x2 and y1 < y2):
        return None
    return Box2D(x1, y1, x2, y2)


def project_to_rig(b: Box3D, cameras: Sequence[Camera]) -> list[tuple[str, Box2D]]:
    """Project into every camera of a rig; keeps only non-empty projections."""
    out = []
    for cam in cameras:
        box = project_box3d_to_image(b, cam.pose, cam.intrinsics)
        if box is not None:
            out.append((cam.camera_id, box))
    return out


def iou_2d(a: Box2D, b: Box2D) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return min(1.0, inter / union)


def iou_aabb(a: Sequence[float], b: Sequence[float]) -> float:
    """IoU of two ``(xmin, ymin, xmax, ymax)`` tuples; 0 for degenerate input."""
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return min(1.0, inter / union) if union > 0 else 0.0


def bev_iou(a: Box3D, b: Box3D) -> float:
    """IoU of the axis-aligned BEV footprints of two boxes."""
    return iou_aabb(bev_footprint_aabb(a), bev_footprint_aabb(b))


def euler_to_matrix(yaw: float, pitch: float, roll: float) -> np.ndarray:
    """Rotation ``Rz(yaw) @ Ry(pitch) @ Rx(roll)``."""
    cy, sy = math.cos(yaw), math.sin(yaw)
    cp, sp = math.cos(pitch), math.sin(pitch)
    cr, sr = math.cos(roll), math.sin(roll)
    rz = np.array([[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]])
    ry = np.array([[cp, 0.0, sp], [0.0, 1.0, 0.0], [-sp, 0.0, cp]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cr, -sr], [0.0, sr, cr]])
    return rz @ ry @ rx


def _orthonormalize(rot: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(rot)
    out = u @ vt
    if np.linalg.det(out) < 0:
        u[:, -1] *= -1
        out = u @ vt
    return out


def perturb_extrinsics(p: Pose, sigma_t: float, sigma_r: float, seed: int) -> Pose:
    """Add Gaussian noise to a pose.

    Translation components get independent N(0, sigma_t) noise. The rotation is
    left-composed with ``euler_to_matrix(dyaw, dpitch, droll)`` where each angle
    is drawn from N(0, sigma_r).
    """
    if sigma_t < 0 or sigma_r < 0:
        raise ValueError("noise levels must be non-negative")
    if sigma_t == 0 and sigma_r == 0:
        return p
    rng = np.random.default_rng(seed)
    dt = rng.normal(0.0, sigma_t, size=3) if sigma_t > 0 else np.zeros(3)
    angles = rng.normal(0.0, sigma_r, size=3) if sigma_r > 0 else np.zeros(3)
    rot = _orthonormalize(euler_to_matrix(*angles) @ p.rotation)
    return Pose(rot, p.translation + dt)


def look_at_pose(position: Sequence[float], yaw: float, pitch: float = 0.0) -> Pose:
    """Pose of a forward-looking camera mounted at ``position`` in the ego frame.

    ``yaw`` is the heading of the optical axis in the ego frame; ``pitch`` tilts
    it downwards for positive values.
    """
    # ego->camera for a camera looking along +x: x_cam = -y, y_cam = -z, z_cam = x
    base = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
    heading = euler_to_matrix(yaw, pitch, 0.0)
    rot = base @ heading.T
    trans = -rot @ np.asarray(position, dtype=float)
    return Pose(_orthonormalize(rot), trans)


def camera_to_dict(cam: Camera) -> dict:
    k = cam.intrinsics
    return {
        "camera_id": cam.camera_id,
        "intrinsics": {"fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy,
                       "width": k.width, "height": k.height},
        "pose": {
            "rotation": [float(v) for v in cam.pose.rotation.reshape(-1)],
            "translation": [float(v) for v in cam.pose.translation],
        },
    }


def camera_from_dict(obj: dict) -> Camera:
    try:
        k = obj["intrinsics"]
        pose = obj["pose"]
        rotation = pose["rotation"]
        if len(rotation) != 9 or len(pose["translation"]) != 3:
            raise ValueError("pose needs 9 rotation and 3 translation values")
        return Camera(
            camera_id=str(obj["camera_id"]),
            intrinsics=CameraIntrinsics(
                float(k["fx"]), float(k["fy"]), float(k["cx"]), float(k["cy"]),
                k["width"], k["height"],
            ),
            pose=Pose(np.asarray(rotation, dtype=float).reshape(3, 3), pose["translation"]),
        )
    except KeyError as exc:
        raise ValueError(f"camera record missing field {exc}") from None


def load_cameras(path) -> list[Camera]:
    """Read a calibration file: a JSON list of camera objects (a single object is accepted)."""
    with open(path) as f:
        data = json.load(f)
    if isinstance(data, dict):
        data = [data]
    cameras = [camera_from_dict(obj) for obj in data]
    ids = [c.camera_id for c in cameras]
    if len(set(ids)) != len(ids):
        raise ValueError(f"{path}: duplicate camera_id")
    return cameras


def save_cameras(cameras: Sequence[Camera], path) -> None:
    Path(path).write_text(json.dumps([camera_to_dict(c) for c in cameras], indent=2) + "\n")
