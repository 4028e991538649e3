import numpy as np
import pytest

from scenes import moving_object, sensor, two_agent_scene
from v2xpre.boxes import Box3D
from v2xpre.geometry import Pose, transform_points
from v2xpre.simulator import (PlacementError, ScenarioConfig, SensorConfig, generate_scenario,
                              inject_localization_error, inject_time_delay, load_sensor_presets,
                              raycast_lidar, render_frame)
from v2xpre.simulator.dataset import FormatError, decode_frame, encode_frame
from v2xpre.simulator.lidar import GROUND_Z
from v2xpre.simulator.scene import Scenario, Trajectory


@pytest.fixture(scope="module")
def scenario():
    return generate_scenario(ScenarioConfig(seed=3))


@pytest.fixture(scope="module")
def frame(scenario):
    return render_frame(scenario, 1.0)


def test_sensor_config_validation():
    with pytest.raises(ValueError):
        SensorConfig(1.8, (0.0,), 0.01, 0.0)
    with pytest.raises(ValueError):
        SensorConfig(1.8, (), 0.01, 10.0)
    with pytest.raises(ValueError):
        SensorConfig(1.8, (0.0,), 0.0, 10.0)


def test_presets_are_heterogeneous_and_overridable():
    p = load_sensor_presets()
    assert p["vehicle"].max_range == 60.0 and p["infrastructure"].max_range == 100.0
    assert p["vehicle"].mount_height != p["infrastructure"].mount_height
    assert load_sensor_presets({"vehicle": {"max_range": 40.0}})["vehicle"].max_range == 40.0


def test_generation_is_deterministic(scenario):
    again = generate_scenario(ScenarioConfig(seed=3))
    assert again.to_dict() == scenario.to_dict()
    assert generate_scenario(ScenarioConfig(seed=4)).to_dict() != scenario.to_dict()


def test_default_layout_is_two_vehicles_and_infrastructure(scenario):
    assert [a.kind for a in scenario.agents].count("vehicle") == 2
    assert [a.kind for a in scenario.agents].count("infrastructure") == 1
    for a in scenario.agents:
        if a.kind == "infrastructure":
            assert a.trajectory.is_static


def test_scenario_dict_round_trip(scenario):
    assert Scenario.from_dict(scenario.to_dict()).to_dict() == scenario.to_dict()


def test_placement_failure_is_explicit():
    with pytest.raises(PlacementError):
        generate_scenario(ScenarioConfig(n_objects=2000, area_bounds=20.0, seed=0))


def test_no_objects_means_ground_only():
    sc = generate_scenario(ScenarioConfig(n_objects=0, seed=1))
    f = render_frame(sc, 0.5)
    for a, c in enumerate(f.per_agent_clouds):
        world = transform_points(f.per_agent_poses[a], c).points
        np.testing.assert_allclose(world[:, 2], GROUND_Z, atol=1e-9)


def test_single_agent_scenarios_have_one_agent():
    sc = generate_scenario(ScenarioConfig(n_coop_agents=0, n_infrastructure=0, seed=2))
    assert render_frame(sc, 0.5).n_agents == 1


def test_raycast_dropout_extremes():
    p = Pose.from_xyz_yaw(0, 0, 1.8, 0)
    rng = np.random.default_rng(0)
    assert len(raycast_lidar([], p, sensor(dropout=1.0), rng)) == 0
    assert len(raycast_lidar([], p, sensor(dropout=0.0), rng)) > 0


def test_points_within_range_and_on_surfaces(frame, scenario):
    boxes = [o.box_at(frame.time) for o in scenario.objects]
    for a, (cloud, pose) in enumerate(zip(frame.per_agent_clouds, frame.per_agent_poses)):
        r = np.linalg.norm(cloud.points, axis=1)
        assert np.all(r <= scenario.agents[a].sensor.max_range + 1e-9)
        world = transform_points(pose, cloud).points
        off_ground = world[np.abs(world[:, 2] - GROUND_Z) > 1e-6]
        for p in off_ground[:: max(1, len(off_ground) // 300)]:
            assert min(_surface_distance(p, b) for b in boxes) < 1e-6


def _surface_distance(p, b: Box3D):
    c, s = np.cos(b.yaw), np.sin(b.yaw)
    d = p - b.center
    local = np.array([c * d[0] + s * d[1], -s * d[0] + c * d[1], d[2]])
    h = np.asarray(b.size) / 2
    q = np.abs(local) - h
    outside = np.linalg.norm(np.maximum(q, 0.0))
    return outside if outside > 0 else -np.max(q)


def test_render_is_deterministic_and_flags_unobserved(scenario, frame):
    again = render_frame(scenario, 1.0)
    for a, b in zip(frame.per_agent_clouds, again.per_agent_clouds):
        np.testing.assert_array_equal(a.points, b.points)
    assert len(frame.gt_boxes) == len(scenario.objects)
    assert any(not b.unobserved for b in frame.gt_boxes)


def test_ego_index_changes_frame_not_world(scenario):
    f0, f1 = render_frame(scenario, 1.0, 0), render_frame(scenario, 1.0, 1)
    for a in range(f0.n_agents):
        np.testing.assert_array_equal(f0.per_agent_clouds[a].points, f1.per_agent_clouds[a].points)
    b0 = f0.gt_boxes[0].transformed(f0.ego_pose)
    b1 = f1.gt_boxes[0].transformed(f1.ego_pose)
    np.testing.assert_allclose(b0.center, b1.center, atol=1e-9)


def test_invalid_time_raises(scenario):
    with pytest.raises(ValueError):
        render_frame(scenario, scenario.config.duration + 1.0)


def test_localization_noise_half_normal_mean(frame):
    rng = np.random.default_rng(0)
    sig = 0.5
    shifts = []
    for _ in range(10_000 // (frame.n_agents - 1) + 1):
        g = inject_localization_error(frame, sig, 0.0, rng)
        for a in range(frame.n_agents):
            if a != frame.ego_index:
                d = g.per_agent_poses[a].translation - frame.per_agent_poses[a].translation
                shifts.append(np.hypot(d[0], d[1]))
    # |dxy| is Rayleigh(sigma) with mean sigma * sqrt(pi / 2)
    assert abs(np.mean(shifts) / (sig * np.sqrt(np.pi / 2)) - 1) < 0.02


def test_localization_noise_contract(frame):
    rng = np.random.default_rng(1)
    assert inject_localization_error(frame, 0.0, 0.0, rng) is frame
    g = inject_localization_error(frame, 0.5, 0.1, rng)
    assert g.ego_pose.allclose(frame.ego_pose, 0.0)
    assert g.gt_boxes == frame.gt_boxes
    for a, b in zip(frame.per_agent_clouds, g.per_agent_clouds):
        assert a is b
    with pytest.raises(ValueError):
        inject_localization_error(frame, -1.0, 0.0, rng)


def test_time_delay_zero_and_static_scene_equal_clean():
    static = two_agent_scene([moving_object(0, 15.0, 5.0, 0.0)])
    clean = render_frame(static, 2.0)
    for d in (0.0, 0.3):
        f = inject_time_delay(static, 2.0, d)
        for a, b in zip(clean.per_agent_clouds, f.per_agent_clouds):
            np.testing.assert_array_equal(a.points, b.points)


def test_time_delay_kinematics_one_meter():
    sc = two_agent_scene([moving_object(0, 10.0, 5.0, 10.0)])
    t, delay = 2.0, 0.1
    f = inject_time_delay(sc, t, delay)
    clean = render_frame(sc, t)
    assert f.gt_boxes == clean.gt_boxes
    stale_box = sc.objects[0].box_at(t - delay)
    now_box = sc.objects[0].box_at(t)
    assert np.linalg.norm(now_box.center - stale_box.center) == pytest.approx(1.0, abs=1e-12)
    # the cooperative cloud sees the object where it was 1.0 m earlier
    shifted = Box3D(now_box.center - [1.0, 0, 0], now_box.size, now_box.yaw)
    ref = raycast_lidar([shifted], sc.agents[1].pose_at(t), sc.agents[1].sensor,
                        np.random.default_rng(0), agent_id=1)
    np.testing.assert_allclose(f.per_agent_clouds[1].points, ref.points, atol=1e-9)
    np.testing.assert_array_equal(f.per_agent_clouds[0].points, clean.per_agent_clouds[0].points)
    with pytest.raises(ValueError):
        inject_time_delay(sc, 0.05, 0.1)


def test_frame_codec_round_trip(frame):
    g = decode_frame(encode_frame(frame))
    assert g.time == frame.time and g.ego_index == frame.ego_index
    assert g.agent_kinds == frame.agent_kinds
    for a, b in zip(frame.per_agent_clouds, g.per_agent_clouds):
        np.testing.assert_array_equal(a.points, b.points)
        np.testing.assert_array_equal(a.provenance, b.provenance)
    for a, b in zip(frame.per_agent_poses, g.per_agent_poses):
        assert a.allclose(b, 0.0)
    assert g.gt_boxes == frame.gt_boxes
    assert encode_frame(g) == encode_frame(frame)


def test_frame_codec_rejects_corruption(frame):
    blob = encode_frame(frame)
    with pytest.raises(FormatError):
        decode_frame(b"XXXX" + blob[4:])
    with pytest.raises(FormatError):
        decode_frame(blob + b"\0")


def test_trajectory_interpolation():
    tr = Trajectory((0.0, 2.0), (0.0, 20.0), (0.0, 0.0), (0.0, 0.0))
    assert tr.state(0.5)[0] == pytest.approx(5.0)
    assert tr.state(5.0)[0] == 20.0
    with pytest.raises(ValueError):
        Trajectory((1.0, 0.5), (0, 0), (0, 0), (0, 0))
