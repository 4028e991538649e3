"""Synthetic V2X scenarios observed by heterogeneous ray-cast LiDARs."""
from v2xpre.simulator.lidar import (
    Frame,
    inject_localization_error,
    inject_time_delay,
    raycast_lidar,
    render_frame,
)
from v2xpre.simulator.scene import (
    AgentSpec,
    PlacementError,
    Scenario,
    ScenarioConfig,
    SceneObject,
    SensorConfig,
    Trajectory,
    generate_scenario,
    load_sensor_presets,
)
