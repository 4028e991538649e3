"""Oriented 3D boxes, BEV rotated IoU and greedy NMS."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from v2xpre import kernels
from v2xpre.geometry import Pose, pose_compose, yaw_matrix

CLASSES = ("car", "truck")


def wrap_angle(a: float) -> float:
    """Map an angle to (-pi, pi]."""
    a = float(np.mod(a + np.pi, 2 * np.pi) - np.pi)
    return np.pi if a == -np.pi else a


@dataclass(frozen=True, eq=False)
class Box3D:
    center: np.ndarray
    size: tuple  # (length, width, height)
    yaw: float
    cls: str = "car"
    unobserved: bool = False
    obj_id: int = -1

    def __post_init__(self):
        c = np.asarray(self.center, dtype=np.float64).reshape(3)
        size = tuple(float(s) for s in self.size)
        if len(size) != 3 or min(size) <= 0:
            raise ValueError(f"box sizes must be positive, got {size}")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))

    def _key(self):
        return (tuple(self.center.tolist()), self.size, self.yaw, self.cls, self.unobserved,
                self.obj_id)

    def __eq__(self, other):
        return isinstance(other, Box3D) and self._key() == other._key()

    def __hash__(self):
        return hash(self._key())

    def pose(self) -> Pose:
        return Pose(yaw_matrix(self.yaw), self.center)

    def transformed(self, p: Pose) -> "Box3D":
        q = pose_compose(p, self.pose())
        return replace(self, center=q.translation, yaw=q.yaw)

    def bev_corners(self) -> np.ndarray:
        """Counter-clockwise (4, 2) footprint."""
        l, w = self.size[0] / 2, self.size[1] / 2
        local = np.array([[l, w], [-l, w], [-l, -w], [l, -w]])
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        R = np.array([[c, -s], [s, c]])
        return local @ R.T + self.center[:2]

    @property
    def bev_range(self) -> float:
        return float(np.hypot(self.center[0], self.center[1]))

    def to_array(self) -> np.ndarray:
        return np.array([*self.center, *self.size, self.yaw])


@dataclass(frozen=True)
class Detection:
    box: Box3D
    score: float

    def __post_init__(self):
        if not (np.isfinite(self.score) and 0.0 <= self.score <= 1.0):
            raise ValueError(f"score must be in [0, 1], got {self.score}")


def _check_area(b: Box3D):
    if b.size[0] * b.size[1] <= 0:
        raise ValueError("degenerate box with zero BEV area")


def rotated_iou(a: Box3D, b: Box3D) -> float:
    """BEV IoU of two yawed rectangles via convex polygon clipping."""
    _check_area(a)
    _check_area(b)
    inter = kernels.convex_intersection_area(a.bev_corners(), b.bev_corners())
    area_a = a.size[0] * a.size[1]
    area_b = b.size[0] * b.size[1]
    return float(min(1.0, max(0.0, inter / (area_a + area_b - inter))))


def iou_matrix(boxes_a, boxes_b) -> np.ndarray:
    if not boxes_a or not boxes_b:
        return np.zeros((len(boxes_a), len(boxes_b)))
    ca = np.stack([b.bev_corners() for b in boxes_a])
    cb = np.stack([b.bev_corners() for b in boxes_b])
    inter = kernels.rect_intersection_areas(ca, cb)
    area_a = np.array([b.size[0] * b.size[1] for b in boxes_a])
    area_b = np.array([b.size[0] * b.size[1] for b in boxes_b])
    return np.clip(inter / (area_a[:, None] + area_b[None, :] - inter), 0.0, 1.0)


def nms(dets, iou_threshold: float):
    """Greedy NMS by descending score; ties keep the earlier index."""
    if not 0 < iou_threshold < 1:
        raise ValueError("iou_threshold must be in (0, 1)")
    dets = list(dets)
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    ious = iou_matrix([d.box for d in dets], [d.box for d in dets])
    kept = []
    suppressed = np.zeros(len(dets), dtype=bool)
    for i in order:
        if suppressed[i]:
            continue
        kept.append(dets[i])
        suppressed |= ious[i] >= iou_threshold
    return kept
