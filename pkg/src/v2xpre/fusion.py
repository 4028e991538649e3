"""Early fusion of multi-agent LiDAR clouds into the ego frame."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from v2xpre.geometry import PointCloud, pose_compose, pose_inverse, transform_points

DEFAULT_BOUNDS = ((-70.4, 70.4), (-70.4, 70.4), (-3.0, 5.0))


@dataclass(frozen=True)
class FusedCloud:
    """Ego-frame cloud; provenance 0 is the ego, 1..N cooperative agents."""

    cloud: PointCloud
    ego_point_count: int
    per_agent_counts: dict

    def __post_init__(self):
        if sum(self.per_agent_counts.values()) != len(self.cloud):
            raise ValueError("per-agent counts do not sum to the total point count")
        if self.per_agent_counts.get(0, 0) != self.ego_point_count:
            raise ValueError("ego_point_count disagrees with per_agent_counts")

    def __len__(self) -> int:
        return len(self.cloud)

    @property
    def points(self) -> np.ndarray:
        return self.cloud.points

    @classmethod
    def from_cloud(cls, cloud: PointCloud, agents=None) -> "FusedCloud":
        ids, cnt = np.unique(cloud.provenance, return_counts=True)
        counts = {int(a): 0 for a in (agents or [])}
        counts.update({int(a): int(c) for a, c in zip(ids, cnt)})
        return cls(cloud, counts.get(0, 0), counts)

    def select(self, index) -> "FusedCloud":
        return FusedCloud.from_cloud(self.cloud.select(index), self.per_agent_counts.keys())

    def only_agent(self, agent: int) -> "FusedCloud":
        return self.select(self.cloud.provenance == agent)

    def with_cloud(self, cloud: PointCloud) -> "FusedCloud":
        return FusedCloud.from_cloud(cloud, self.per_agent_counts.keys())


def agent_order(frame) -> list:
    """Frame agent indices in fused provenance order: ego first, then by index."""
    return [frame.ego_index] + [a for a in range(frame.n_agents) if a != frame.ego_index]


def coop_to_ego(frame, agent: int):
    """Reported-pose transform from ``agent``'s sensor frame to the ego frame."""
    return pose_compose(pose_inverse(frame.ego_pose), frame.per_agent_poses[agent])


def project_agent(frame, agent: int, label: int) -> PointCloud:
    c = frame.per_agent_clouds[agent]
    pts = transform_points(coop_to_ego(frame, agent), c).points
    return PointCloud(pts, np.full(len(c), label, dtype=np.int64))


def early_fuse(frame, agents=None) -> FusedCloud:
    """Concatenate the ego cloud with every cooperative cloud projected into the ego frame.

    ``agents`` optionally restricts fusion to a subset of frame agent indices
    (the ego is always included).
    """
    order = agent_order(frame)
    parts = []
    for label, a in enumerate(order):
        if agents is not None and a != frame.ego_index and a not in agents:
            continue
        if a == frame.ego_index:
            c = frame.per_agent_clouds[a]
            parts.append(PointCloud(c.points, np.zeros(len(c), dtype=np.int64)))
        else:
            parts.append(project_agent(frame, a, label))
    return FusedCloud.from_cloud(PointCloud.concat(parts), range(len(order)))


def crop_range(fc: FusedCloud, bounds=DEFAULT_BOUNDS) -> FusedCloud:
    """Keep points strictly inside the axis-aligned bounds."""
    bounds = np.asarray(bounds, dtype=np.float64)
    if bounds.shape != (3, 2) or np.any(bounds[:, 1] <= bounds[:, 0]):
        raise ValueError(f"degenerate crop bounds {bounds.tolist()}")
    p = fc.points
    keep = np.all((p > bounds[:, 0]) & (p < bounds[:, 1]), axis=1)
    return fc.select(keep)
