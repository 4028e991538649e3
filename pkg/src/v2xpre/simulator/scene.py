"""Scenario configuration, agents, objects and procedural scenario generation."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from importlib import resources

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from v2xpre.boxes import Box3D
from v2xpre.geometry import Pose, yaw_matrix

FAMILIES = ("intersection", "corridor")
AGENT_KINDS = ("vehicle", "infrastructure")

CLASS_SIZES = {  # (lo, hi) per dimension: length, width, height
    "car": ((3.9, 4.8), (1.7, 2.0), (1.4, 1.7)),
    "truck": ((7.0, 10.0), (2.4, 2.6), (3.0, 3.5)),
}
LANE_OFFSET = 1.75
MAX_PLACEMENT_ATTEMPTS = 1000


class PlacementError(RuntimeError):
    pass


@dataclass(frozen=True)
class SensorConfig:
    mount_height: float
    elevation_angles: tuple
    azimuth_step: float
    max_range: float
    dropout_prob: float = 0.0

    def __post_init__(self):
        if not self.max_range > 0:
            raise ValueError("max_range must be > 0")
        if not self.azimuth_step > 0:
            raise ValueError("azimuth_step must be > 0")
        if len(self.elevation_angles) < 1:
            raise ValueError("at least one elevation channel is required")
        if not 0 <= self.dropout_prob <= 1:
            raise ValueError("dropout_prob must be in [0, 1]")
        object.__setattr__(self, "elevation_angles", tuple(float(e) for e in self.elevation_angles))

    def ray_directions(self) -> np.ndarray:
        """Unit ray directions in the sensor frame, elevation-major."""
        elev = np.asarray(self.elevation_angles)
        n_az = int(round(2 * np.pi / self.azimuth_step))
        az = np.arange(n_az) * (2 * np.pi / n_az)
        e, a = np.meshgrid(elev, az, indexing="ij")
        d = np.stack([np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.sin(e)], axis=-1)
        return d.reshape(-1, 3)

    @classmethod
    def from_preset(cls, table: dict) -> "SensorConfig":
        elev = np.deg2rad(np.linspace(table["elevation_min_deg"], table["elevation_max_deg"],
                                      int(table["channels"])))
        return cls(
            mount_height=float(table["mount_height"]),
            elevation_angles=tuple(elev.tolist()),
            azimuth_step=math.radians(table["azimuth_step_deg"]),
            max_range=float(table["max_range"]),
            dropout_prob=float(table["dropout_prob"]),
        )


def load_sensor_presets(overrides: dict | None = None) -> dict:
    text = resources.files("v2xpre").joinpath("presets/sensors.toml").read_text()
    tables = tomllib.loads(text)
    for kind, vals in (overrides or {}).items():
        tables.setdefault(kind, {}).update(vals)
    return {kind: SensorConfig.from_preset(t) for kind, t in tables.items()}


@dataclass(frozen=True)
class Trajectory:
    """Piecewise-linear planar path: waypoints (t, x, y, yaw) at constant height z."""

    times: tuple
    xs: tuple
    ys: tuple
    yaws: tuple
    z: float = 0.0

    def __post_init__(self):
        if not (len(self.times) == len(self.xs) == len(self.ys) == len(self.yaws) >= 1):
            raise ValueError("trajectory waypoint arrays must be non-empty and equal length")
        if any(b <= a for a, b in zip(self.times, self.times[1:])):
            raise ValueError("trajectory times must be strictly increasing")

    @classmethod
    def static(cls, x, y, yaw, z=0.0) -> "Trajectory":
        return cls((0.0,), (float(x),), (float(y),), (float(yaw),), float(z))

    @property
    def is_static(self) -> bool:
        return (len(set(self.xs)) <= 1 and len(set(self.ys)) <= 1
                and len(set(self.yaws)) <= 1)

    def state(self, t: float):
        ts = self.times
        if len(ts) == 1 or t <= ts[0]:
            return self.xs[0], self.ys[0], self.yaws[0]
        if t >= ts[-1]:
            return self.xs[-1], self.ys[-1], self.yaws[-1]
        k = int(np.searchsorted(ts, t, side="right")) - 1
        u = (t - ts[k]) / (ts[k + 1] - ts[k])
        x = self.xs[k] + u * (self.xs[k + 1] - self.xs[k])
        y = self.ys[k] + u * (self.ys[k + 1] - self.ys[k])
        dyaw = math.remainder(self.yaws[k + 1] - self.yaws[k], 2 * math.pi)
        return x, y, self.yaws[k] + u * dyaw

    def pose_at(self, t: float) -> Pose:
        x, y, yaw = self.state(t)
        return Pose(yaw_matrix(yaw), np.array([x, y, self.z]))

    def to_dict(self) -> dict:
        return {"times": list(self.times), "xs": list(self.xs), "ys": list(self.ys),
                "yaws": list(self.yaws), "z": self.z}

    @classmethod
    def from_dict(cls, d) -> "Trajectory":
        return cls(tuple(d["times"]), tuple(d["xs"]), tuple(d["ys"]), tuple(d["yaws"]), d["z"])


@dataclass(frozen=True)
class AgentSpec:
    kind: str
    sensor: SensorConfig
    trajectory: Trajectory  # of the sensor origin (z = mount height)

    def __post_init__(self):
        if self.kind not in AGENT_KINDS:
            raise ValueError(f"unknown agent kind {self.kind!r}")
        if self.kind == "infrastructure" and not self.trajectory.is_static:
            raise ValueError("infrastructure trajectories must be time-invariant")

    def pose_at(self, t: float) -> Pose:
        return self.trajectory.pose_at(t)


@dataclass(frozen=True)
class SceneObject:
    id: int
    cls: str
    size: tuple
    trajectory: Trajectory  # of the box center (z = height / 2)

    def __post_init__(self):
        if min(self.size) <= 0:
            raise ValueError("object sizes must be positive")

    def box_at(self, t: float) -> Box3D:
        x, y, yaw = self.trajectory.state(t)
        return Box3D((x, y, self.trajectory.z), self.size, yaw, self.cls, obj_id=self.id)


@dataclass(frozen=True)
class ScenarioConfig:
    n_coop_agents: int = 2
    n_infrastructure: int = 1
    n_objects: int = 20
    area_bounds: float = 70.0
    duration: float = 4.0
    frame_rate: float = 2.0
    start_time: float = 0.5
    scenario_family: str = "intersection"
    truck_fraction: float = 0.1
    max_speed: float = 12.0
    seed: int = 0

    def __post_init__(self):
        if self.n_coop_agents < 0 or self.n_objects < 0 or self.n_infrastructure < 0:
            raise ValueError("counts must be >= 0")
        if not (self.area_bounds > 0 and self.duration > 0 and self.frame_rate > 0):
            raise ValueError("area_bounds, duration and frame_rate must be positive")
        if not 0 <= self.start_time <= self.duration:
            raise ValueError("start_time must lie within the duration")
        if self.scenario_family not in FAMILIES:
            raise ValueError(f"scenario_family must be one of {FAMILIES}")

    def frame_times(self) -> np.ndarray:
        n = int(math.floor((self.duration - self.start_time) * self.frame_rate + 1e-9)) + 1
        return self.start_time + np.arange(n) / self.frame_rate

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Scenario:
    config: ScenarioConfig
    agents: tuple
    objects: tuple
    ego_index: int = 0

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "ego_index": self.ego_index,
            "agents": [{"kind": a.kind, "sensor": asdict(a.sensor),
                        "trajectory": a.trajectory.to_dict()} for a in self.agents],
            "objects": [{"id": o.id, "cls": o.cls, "size": list(o.size),
                         "trajectory": o.trajectory.to_dict()} for o in self.objects],
        }

    @classmethod
    def from_dict(cls, d) -> "Scenario":
        agents = tuple(
            AgentSpec(a["kind"], SensorConfig(**{**a["sensor"],
                                                 "elevation_angles": tuple(a["sensor"]["elevation_angles"])}),
                      Trajectory.from_dict(a["trajectory"]))
            for a in d["agents"])
        objects = tuple(SceneObject(o["id"], o["cls"], tuple(o["size"]),
                                    Trajectory.from_dict(o["trajectory"])) for o in d["objects"])
        return cls(ScenarioConfig(**d["config"]), agents, objects, d["ego_index"])


def _footprint(x, y, yaw, l, w, margin=0.5) -> Box3D:
    return Box3D((x, y, 0.0), (l + 2 * margin, w + 2 * margin, 1.0), yaw)


def _overlaps(box: Box3D, others) -> bool:
    from v2xpre.boxes import iou_matrix
    if not others:
        return False
    return bool(np.any(iou_matrix([box], list(others)) > 0))


def _road_path(rng, cfg, road_axis, duration, speed, turning):
    """Lane-following path on the x road (axis 0) or y road (axis 1)."""
    L = cfg.area_bounds
    direction = 1.0 if rng.random() < 0.5 else -1.0
    lateral = -direction * LANE_OFFSET if road_axis == 0 else direction * LANE_OFFSET
    s0 = rng.uniform(-L, L)
    heading = 0.0 if direction > 0 else math.pi
    if road_axis == 1:
        heading += math.pi / 2

    def pt(s):
        return (s, lateral) if road_axis == 0 else (lateral, s)

    x0, y0 = pt(s0)
    dist = speed * duration
    # turn through the junction only when the path reaches it
    reach = -s0 * direction
    if turning and cfg.scenario_family == "intersection" and 0 < reach < dist:
        t_turn = reach / speed
        xt, yt = pt(s0 + direction * reach)
        left = rng.random() < 0.5
        new_heading = heading + (math.pi / 2 if left else -math.pi / 2)
        rem = dist - reach
        x1 = xt + rem * math.cos(new_heading)
        y1 = yt + rem * math.sin(new_heading)
        return Trajectory((0.0, t_turn, duration), (x0, xt, x1), (y0, yt, y1),
                          (heading, new_heading, new_heading))
    if speed == 0.0:
        return Trajectory.static(x0, y0, heading)
    x1 = x0 + dist * math.cos(heading)
    y1 = y0 + dist * math.sin(heading)
    return Trajectory((0.0, duration), (x0, x1), (y0, y1), (heading, heading))


def _agent_layout(rng, cfg, presets):
    """Ego first, then cooperative agents (infrastructure before vehicles)."""
    agents = []
    footprints = []
    vsens, isens = presets["vehicle"], presets["infrastructure"]
    T = cfg.duration
    n_infra = min(cfg.n_infrastructure, cfg.n_coop_agents)
    n_veh = cfg.n_coop_agents - n_infra

    def add_vehicle(x, y, yaw, speed):
        x1, y1 = x + speed * T * math.cos(yaw), y + speed * T * math.sin(yaw)
        traj = Trajectory((0.0, T), (x, x1), (y, y1), (yaw, yaw), vsens.mount_height)
        agents.append(AgentSpec("vehicle", vsens, traj))
        footprints.append(_footprint(x, y, yaw, 4.5, 1.9))

    def add_infra(x, y):
        yaw = math.atan2(-y, -x)
        agents.append(AgentSpec("infrastructure", isens,
                                Trajectory.static(x, y, yaw, isens.mount_height)))

    speed = lambda: float(rng.uniform(2.0, 10.0))
    if cfg.scenario_family == "intersection":
        add_vehicle(-rng.uniform(15.0, 35.0), -LANE_OFFSET, 0.0, speed())
        for k in range(n_infra):
            sx, sy = [(1, 1), (-1, -1), (1, -1), (-1, 1)][k % 4]
            add_infra(sx * rng.uniform(9.0, 12.0), sy * rng.uniform(9.0, 12.0))
        arms = [(LANE_OFFSET, -1, math.pi / 2), (-LANE_OFFSET, 1, -math.pi / 2),
                (1, LANE_OFFSET, math.pi)]
        for k in range(n_veh):
            a, b, yaw = arms[k % 3]
            d = rng.uniform(15.0, 40.0)
            if k % 3 == 2:
                add_vehicle(d, LANE_OFFSET, yaw, speed())
            else:
                add_vehicle(a, b * d, yaw, speed())
    else:
        add_vehicle(-rng.uniform(0.0, 10.0), -LANE_OFFSET, 0.0, speed())
        for k in range(n_infra):
            add_infra(rng.uniform(-30.0, 40.0), 10.0 * (1 if k % 2 == 0 else -1))
        for k in range(n_veh):
            ahead = rng.uniform(20.0, 50.0) * (1 if k % 2 == 0 else -1)
            if rng.random() < 0.5:
                add_vehicle(ahead, -LANE_OFFSET, 0.0, speed())
            else:
                add_vehicle(ahead, LANE_OFFSET, math.pi, speed())
    return agents, footprints


def generate_scenario(cfg: ScenarioConfig, presets: dict | None = None) -> Scenario:
    """Procedural scene: agents per family, then objects by rejection sampling.

    Raises PlacementError when an object cannot be placed without overlap
    after ``MAX_PLACEMENT_ATTEMPTS`` tries.
    """
    presets = presets or load_sensor_presets()
    rng = np.random.default_rng([cfg.seed, 7001])
    agents, footprints = _agent_layout(rng, cfg, presets)
    placed = list(footprints)
    objects = []
    for oid in range(cfg.n_objects):
        cls = "truck" if rng.random() < cfg.truck_fraction else "car"
        size = tuple(float(rng.uniform(lo, hi)) for lo, hi in CLASS_SIZES[cls])
        for _ in range(MAX_PLACEMENT_ATTEMPTS):
            axis = 0 if cfg.scenario_family == "corridor" else int(rng.integers(2))
            spd = float(rng.uniform(0.0, cfg.max_speed))
            traj = _road_path(rng, cfg, axis, cfg.duration, spd, turning=rng.random() < 0.3)
            traj = Trajectory(traj.times, traj.xs, traj.ys, traj.yaws, size[2] / 2)
            fp = _footprint(traj.xs[0], traj.ys[0], traj.yaws[0], size[0], size[1])
            if not _overlaps(fp, placed):
                placed.append(fp)
                objects.append(SceneObject(oid, cls, size, traj))
                break
        else:
            raise PlacementError(
                f"could not place object {oid} after {MAX_PLACEMENT_ATTEMPTS} attempts")
    return Scenario(cfg, tuple(agents), tuple(objects))
