"""Rigid-body math, point-cloud containers and pretraining augmentations.

All geometry is float64. Poses are full 3x3 rotations plus a translation,
even though the simulator mostly emits yaw-only poses.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class Pose:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if R.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {R.shape}")
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("pose contains non-finite values")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_xyz_yaw(cls, x: float, y: float, z: float, yaw: float) -> "Pose":
        return cls(yaw_matrix(yaw), np.array([x, y, z], dtype=np.float64))

    @property
    def yaw(self) -> float:
        return float(np.arctan2(self.rotation[1, 0], self.rotation[0, 0]))

    def orthonormality_residual(self) -> float:
        R = self.rotation
        return float(np.max(np.abs(R @ R.T - np.eye(3))))

    def is_valid(self, tol: float = ORTHO_TOL) -> bool:
        return (self.orthonormality_residual() <= tol
                and abs(np.linalg.det(self.rotation) - 1.0) <= tol)

    def as_matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def to_array(self) -> np.ndarray:
        """12 floats: rotation row-major, then translation."""
        return np.concatenate([self.rotation.reshape(9), self.translation])

    @classmethod
    def from_array(cls, a) -> "Pose":
        a = np.asarray(a, dtype=np.float64)
        return cls(a[:9].reshape(3, 3), a[9:12])

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        return (np.allclose(self.rotation, other.rotation, rtol=0, atol=atol)
                and np.allclose(self.translation, other.translation, rtol=0, atol=atol))


def yaw_matrix(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def pose_compose(a: Pose, b: Pose) -> Pose:
    """Pose that applies ``b`` first, then ``a``."""
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def pose_inverse(p: Pose) -> Pose:
    Rt = p.rotation.T
    return Pose(Rt, -Rt @ p.translation)


def random_pose(rng: np.random.Generator, trans_scale: float = 50.0) -> Pose:
    """Uniformly random rotation (via QR of a Gaussian matrix) and translation."""
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return Pose(q, rng.uniform(-trans_scale, trans_scale, 3))


@dataclass(frozen=True)
class PointCloud:
    """Points (n, 3) with a per-point source agent id (ego = 0)."""

    points: np.ndarray
    provenance: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        prov = np.asarray(self.provenance, dtype=np.int64).reshape(-1)
        if len(prov) != len(pts):
            raise ValueError(f"provenance length {len(prov)} != point count {len(pts)}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains non-finite coordinates")
        pts.setflags(write=False)
        prov.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "provenance", prov)

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.zeros((0, 3)), np.zeros(0, dtype=np.int64))

    @classmethod
    def from_points(cls, points, agent: int = 0) -> "PointCloud":
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return cls(points, np.full(len(points), agent, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.points)

    def select(self, index) -> "PointCloud":
        return PointCloud(self.points[index], self.provenance[index])

    @staticmethod
    def concat(clouds) -> "PointCloud":
        clouds = list(clouds)
        if not clouds:
            return PointCloud.empty()
        return PointCloud(np.concatenate([c.points for c in clouds]),
                          np.concatenate([c.provenance for c in clouds]))


def transform_points(p: Pose, c: PointCloud) -> PointCloud:
    return PointCloud(c.points @ p.rotation.T + p.translation, c.provenance)


@dataclass(frozen=True)
class AugmentParams:
    scale: float = 1.0
    yaw: float = 0.0
    flip_x: bool = False
    flip_y: bool = False
    keep_ratio: float = 1.0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"scale must be > 0, got {self.scale}")
        if not 0 < self.keep_ratio <= 1:
            raise ValueError(f"keep_ratio must be in (0, 1], got {self.keep_ratio}")

    @classmethod
    def sample(cls, rng: np.random.Generator, scale_range=(0.95, 1.05),
               yaw_range=(-np.pi / 4, np.pi / 4), keep_range=(0.8, 1.0),
               downsample: bool = True) -> "AugmentParams":
        return cls(
            scale=float(rng.uniform(*scale_range)),
            yaw=float(rng.uniform(*yaw_range)),
            flip_x=bool(rng.random() < 0.5),
            flip_y=bool(rng.random() < 0.5),
            keep_ratio=float(rng.uniform(*keep_range)) if downsample else 1.0,
        )

    def point_transform(self) -> np.ndarray:
        """3x3 linear map for scale -> yaw -> flips (downsampling excluded)."""
        flip = np.diag([-1.0 if self.flip_y else 1.0, -1.0 if self.flip_x else 1.0, 1.0])
        return flip @ yaw_matrix(self.yaw) * self.scale


def augment(c: PointCloud, a: AugmentParams, rng: np.random.Generator) -> PointCloud:
    """Scale about the origin, rotate about z, flip, then uniformly subsample.

    ``flip_x`` mirrors across the x axis (negates y), ``flip_y`` mirrors
    across the y axis (negates x). Exactly ``round(keep_ratio * n)`` points
    are kept, in their original order.
    """
    pts = c.points @ a.point_transform().T
    out = PointCloud(pts, c.provenance)
    n = len(c)
    keep = int(np.floor(a.keep_ratio * n + 0.5))
    if keep < n:
        idx = np.sort(rng.choice(n, size=keep, replace=False))
        out = out.select(idx)
    return out
