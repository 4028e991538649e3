"""Ray-cast LiDAR rendering, synchronized frames and perturbation injectors."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from v2xpre import kernels
from v2xpre.geometry import Pose, PointCloud, pose_inverse, yaw_matrix

GROUND_Z = 0.0


@dataclass(frozen=True)
class Frame:
    time: float
    ego_index: int
    per_agent_clouds: tuple  # PointCloud per agent, local sensor frame
    per_agent_poses: tuple  # reported world pose per agent
    gt_boxes: tuple  # Box3D in the ego frame
    agent_kinds: tuple = ()

    def __post_init__(self):
        if len(self.per_agent_clouds) != len(self.per_agent_poses):
            raise ValueError("clouds and poses must be indexed consistently")
        if not 0 <= self.ego_index < len(self.per_agent_clouds):
            raise ValueError(f"ego_index {self.ego_index} out of range")

    @property
    def n_agents(self) -> int:
        return len(self.per_agent_clouds)

    @property
    def ego_pose(self) -> Pose:
        return self.per_agent_poses[self.ego_index]


def raycast_lidar(boxes, sensor_pose: Pose, sensor, rng: np.random.Generator,
                  agent_id: int = 0, return_codes: bool = False):
    """Nearest ray hits against world boxes and the ground plane z=0.

    Points come back in the sensor frame. Each return is independently
    dropped with ``sensor.dropout_prob``.
    """
    local_dirs = sensor.ray_directions()
    world_dirs = local_dirs @ sensor_pose.rotation.T
    if boxes:
        centers = np.stack([b.center for b in boxes])
        rots = np.stack([yaw_matrix(b.yaw) for b in boxes])
        halves = np.array([b.size for b in boxes]) / 2
    else:
        centers, rots, halves = np.zeros((0, 3)), np.zeros((0, 3, 3)), np.zeros((0, 3))
    t, code = kernels.raycast(sensor_pose.translation, world_dirs, centers, rots, halves,
                              GROUND_Z, sensor.max_range)
    hit = code != kernels.NO_HIT
    if sensor.dropout_prob > 0:
        hit &= rng.random(len(hit)) >= sensor.dropout_prob
    pts = local_dirs[hit] * t[hit, None]
    cloud = PointCloud.from_points(pts, agent_id)
    if return_codes:
        return cloud, code[hit]
    return cloud


def _agent_rng(scenario, agent_index: int, t: float) -> np.random.Generator:
    return np.random.default_rng([scenario.config.seed, 9103, agent_index,
                                  int(round(t * 1e6))])


def _check_time(scenario, t):
    if not (0.0 <= t <= scenario.config.duration):
        raise ValueError(f"time {t} outside scenario duration [0, {scenario.config.duration}]")


def _render_agent(scenario, agent_index: int, t: float, boxes):
    agent = scenario.agents[agent_index]
    pose = agent.pose_at(t)
    cloud, codes = raycast_lidar(boxes, pose, agent.sensor, _agent_rng(scenario, agent_index, t),
                                 agent_id=agent_index, return_codes=True)
    return pose, cloud, codes


def render_frame(scenario, t: float, ego_index: int | None = None) -> Frame:
    """Render every agent's cloud at time ``t`` with labels in the ego frame.

    Boxes no agent hits are kept but flagged ``unobserved``.
    """
    _check_time(scenario, t)
    ego_index = scenario.ego_index if ego_index is None else ego_index
    if not 0 <= ego_index < len(scenario.agents):
        raise ValueError(f"ego_index {ego_index} out of range")
    boxes = [o.box_at(t) for o in scenario.objects]
    poses, clouds = [], []
    hits = np.zeros(len(boxes), dtype=np.int64)
    for a in range(len(scenario.agents)):
        pose, cloud, codes = _render_agent(scenario, a, t, boxes)
        poses.append(pose)
        clouds.append(cloud)
        obj_codes = codes[codes >= 0]
        hits += np.bincount(obj_codes, minlength=len(boxes))[:len(boxes)]
    world_to_ego = pose_inverse(poses[ego_index])
    gt = tuple(replace(b.transformed(world_to_ego), unobserved=bool(h == 0))
               for b, h in zip(boxes, hits))
    kinds = tuple(a.kind for a in scenario.agents)
    return Frame(float(t), ego_index, tuple(clouds), tuple(poses), gt, kinds)


def inject_localization_error(f: Frame, sigma_xy: float, sigma_yaw: float,
                              rng: np.random.Generator) -> Frame:
    """Gaussian noise on cooperative agents' reported x, y and yaw."""
    if sigma_xy < 0 or sigma_yaw < 0:
        raise ValueError("noise sigmas must be >= 0")
    if sigma_xy == 0 and sigma_yaw == 0:
        return f
    poses = list(f.per_agent_poses)
    for a, p in enumerate(poses):
        if a == f.ego_index:
            continue
        dx, dy = rng.normal(0.0, sigma_xy, 2) if sigma_xy > 0 else (0.0, 0.0)
        dyaw = rng.normal(0.0, sigma_yaw) if sigma_yaw > 0 else 0.0
        poses[a] = Pose(yaw_matrix(dyaw) @ p.rotation, p.translation + np.array([dx, dy, 0.0]))
    return replace(f, per_agent_poses=tuple(poses))


def inject_time_delay(scenario, t: float, delay: float, ego_index: int | None = None) -> Frame:
    """Ego at ``t``; cooperative clouds and reported poses from ``t - delay``."""
    if t - delay < 0:
        raise ValueError(f"t - delay = {t - delay} < 0")
    clean = render_frame(scenario, t, ego_index)
    if delay == 0:
        return clean
    stale = t - delay
    boxes = [o.box_at(stale) for o in scenario.objects]
    clouds = list(clean.per_agent_clouds)
    poses = list(clean.per_agent_poses)
    for a in range(len(scenario.agents)):
        if a == clean.ego_index:
            continue
        poses[a], clouds[a], _ = _render_agent(scenario, a, stale, boxes)
    return replace(clean, per_agent_clouds=tuple(clouds), per_agent_poses=tuple(poses))
