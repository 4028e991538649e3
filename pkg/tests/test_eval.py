import math

import numpy as np
import pytest

from scenes import moving_object, two_agent_scene
from v2xpre.bevgrid import BevSpec
from v2xpre.boxes import Box3D, rotated_iou
from v2xpre.coopre import EncoderConfig
from v2xpre.eval import AttentionFuse, attention_fuse, decode_detections
from v2xpre.eval.detector import (CLASS_PRIORS, HEAD_CHANNELS, DetHead, canonical_yaw,
                                  encode_targets)
from v2xpre.eval.finetune import (FinetuneConfig, augment_scene, build_detector, finetune,
                                  frame_inputs, in_grid, label_subset)
from v2xpre.eval.harness import (content_hash, data_efficiency_harness, git_blob_hash,
                                 metric_columns, robustness_harness, write_csv)
from v2xpre.geometry import AugmentParams, PointCloud
from v2xpre.nn import tensor as T
from v2xpre.simulator import ScenarioConfig, generate_scenario, render_frame

SPEC = BevSpec(-25.6, 25.6, -25.6, 25.6, 1.6)
ENC = EncoderConfig(max_points_per_pillar=8, pillar_feature_dim=8, bev_channels=8)


@pytest.fixture(scope="module")
def scene():
    return generate_scenario(ScenarioConfig(n_objects=8, area_bounds=30.0, seed=31))


@pytest.fixture(scope="module")
def frames(scene):
    return [render_frame(scene, t) for t in (0.5, 1.0, 1.5, 2.0)]


# -- attention -------------------------------------------------------------------

def _feats(rng, a):
    return [rng.normal(size=(4, 5, 6)) for _ in range(a)]


def test_single_agent_attention_is_identity():
    f = _feats(np.random.default_rng(0), 1)
    np.testing.assert_allclose(attention_fuse(f).data, f[0], atol=1e-12)


def test_duplicate_agents_equal_single_agent():
    f = _feats(np.random.default_rng(1), 1)
    np.testing.assert_allclose(attention_fuse(f * 3).data, f[0], atol=1e-12)


def test_attention_invariant_to_coop_order():
    rng = np.random.default_rng(2)
    f = _feats(rng, 4)
    m = AttentionFuse(6)
    for p in (m.wq, m.wk, m.wv):
        p.data[:] = rng.normal(size=(6, 6))
    a = m(f).data
    b = m([f[0], f[3], f[1], f[2]]).data
    np.testing.assert_allclose(a, b, atol=1e-12)  # only summation order differs


def test_attention_shape_errors():
    with pytest.raises(T.ShapeError):
        attention_fuse([np.zeros((4, 4, 2)), np.zeros((4, 5, 2))])
    with pytest.raises(ValueError):
        attention_fuse([])


# -- head, targets, decoding ---------------------------------------------------------

def test_head_zero_weights_give_half_scores():
    head = DetHead(4, np.random.default_rng(0))
    for p in head.parameters():
        p.data[:] = 0.0
    out = head(T.Tensor(np.ones((5, 5, 4)))).data
    assert out.shape == (5, 5, HEAD_CHANNELS) and np.all(out[..., 0] == 0.0)
    assert len(decode_detections(out, BevSpec(0, 8, 0, 8, 1.6), 0.5)) == 25


def test_decode_examples_and_monotonicity():
    spec = BevSpec(0, 16, 0, 16, 1.6)
    out = np.full((10, 10, 7), -1e9)
    out[..., 6] = 1.0  # cos
    assert decode_detections(out, spec, 0.5) == []
    out[3, 4, 0] = 5.0
    out[3, 4, 1:6] = 0.0
    (d,) = decode_detections(out, spec, 0.5)
    cx, cy = spec.cell_center(3, 4)
    np.testing.assert_allclose(d.box.center[:2], [cx, cy])
    assert d.box.size[:2] == pytest.approx(CLASS_PRIORS["car"][:2]) and d.box.yaw == 0.0
    rng = np.random.default_rng(0)
    out = rng.normal(size=(10, 10, 7))
    counts = [len(decode_detections(out, spec, t)) for t in (0.2, 0.4, 0.6, 0.8)]
    assert counts == sorted(counts, reverse=True)
    with pytest.raises(ValueError):
        decode_detections(out, spec, 1.0)


def test_yaw_sin_cos_round_trip():
    for yaw in np.linspace(-np.pi + 1e-6, np.pi, 37):
        assert abs(math.atan2(math.sin(yaw), math.cos(yaw)) - yaw) < 1e-9


def test_canonical_yaw_is_same_rectangle():
    for yaw in np.linspace(-3.1, 3.1, 25):
        c = canonical_yaw(yaw)
        assert -np.pi / 4 < c <= 3 * np.pi / 4
        a, b = Box3D((0, 0, 0), (4, 2, 1), yaw), Box3D((0, 0, 0), (4, 2, 1), c)
        assert rotated_iou(a, b) == pytest.approx(1.0, abs=1e-9)


def test_encode_then_decode_recovers_boxes():
    spec = BevSpec(-16, 16, -16, 16, 1.6)
    boxes = [Box3D((3.3, -5.1, -1.0), (4.0, 1.9, 1.5), 0.4),
             Box3D((-9.0, 7.7, -1.0), (4.6, 2.0, 1.5), 2.9),
             Box3D((0.0, 0.0, -1.0), (4.0, 2.0, 1.5), 0.0, unobserved=True)]
    i, j, tg, ignore = encode_targets(boxes, spec, radius=0)
    assert len(i) == 2 and len(ignore) == 1
    out = np.full(spec.shape + (7,), -50.0)
    for k in range(2):
        prior = CLASS_PRIORS["car"]
        out[i[k], j[k]] = [50.0, tg[k, 0], tg[k, 1], tg[k, 2], tg[k, 3], tg[k, 4], tg[k, 5]]
        assert prior[0] > 0
    dets = decode_detections(out, spec, 0.5)
    for d, b in zip(sorted(dets, key=lambda d: d.box.center[0]),
                    sorted(boxes[:2], key=lambda b: b.center[0])):
        assert rotated_iou(d.box, b) == pytest.approx(1.0, abs=1e-9)


def test_positive_radius_and_nearest_claims():
    spec = BevSpec(-16, 16, -16, 16, 1.6)
    b = [Box3D((0.8, 0.8, 0), (4, 2, 1), 0.0), Box3D((4.0, 0.8, 0), (4, 2, 1), 0.0)]
    i, j, _, _ = encode_targets(b, spec, radius=1)
    cells = list(zip(i.tolist(), j.tolist()))
    assert len(cells) == len(set(cells))
    assert len(cells) == 9 + 6  # the second box loses the shared column


# -- finetuning plumbing ---------------------------------------------------------------

def test_label_subsets_are_nested_and_sized():
    a, b, c = (set(label_subset(100, f, 4).tolist()) for f in (0.2, 0.5, 0.8))
    assert a <= b <= c and (len(a), len(b), len(c)) == (20, 50, 80)
    assert len(label_subset(3, 0.01, 0)) == 1
    assert list(label_subset(10, 1.0, 9)) == list(range(10))


def test_augment_scene_keeps_boxes_on_their_points():
    b = Box3D((10.0, 4.0, 0.5), (4.0, 2.0, 1.0), 0.3)
    c, s = np.cos(b.yaw), np.sin(b.yaw)
    corner = b.center + np.array([2 * c - 1 * s, 2 * s + 1 * c, 0.0])  # (+l/2, +w/2) corner
    cloud = PointCloud.from_points(np.stack([b.center, corner]))
    for a in (AugmentParams(1.03, 0.5, True, False), AugmentParams(0.97, -0.2, False, True),
              AugmentParams(1.0, 0.7, True, True)):
        (out,), (nb,) = augment_scene([cloud], [b], a)
        np.testing.assert_allclose(out.points[0], nb.center, atol=1e-12)
        d = np.linalg.norm(out.points[1, :2] - nb.center[:2])
        assert d == pytest.approx(np.hypot(nb.size[0], nb.size[1]) / 2, abs=1e-9)
        assert min(np.linalg.norm(nb.bev_corners() - out.points[1, :2], axis=1)) < 1e-9


def test_frame_inputs_orders_ego_first(frames):
    cfg = FinetuneConfig()
    pillars, boxes = frame_inputs(frames[0], SPEC, ENC, cfg, np.random.default_rng(0))
    assert len(pillars) == frames[0].n_agents
    assert all(np.all(p.features[..., 6][p.mask[..., 0] > 0] == 0) for p in pillars[:1])
    assert boxes == list(frames[0].gt_boxes)
    assert all(abs(b.center[0]) < 25.6 for b in in_grid(boxes, SPEC))


def _ft(**kw):
    base = dict(epochs=1, seed=3, augment=False)
    base.update(kw)
    return FinetuneConfig(**base)


def test_finetune_is_deterministic_and_checkpoint_init_matches_scratch(frames):
    a = finetune(frames, frames[:2], SPEC, ENC, _ft())
    b = finetune(frames, frames[:2], SPEC, ENC, _ft())
    assert a.curve == b.curve and a.metrics == b.metrics
    random_init = build_detector(SPEC, ENC, _ft()).encoder.state_dict()
    c = finetune(frames, frames[:2], SPEC, ENC, _ft(init="from_checkpoint"), random_init)
    assert c.curve == a.curve


def test_min_steps_extends_small_subsets(frames):
    r = finetune(frames, frames[:1], SPEC, ENC, _ft(label_fraction=0.5, min_steps=5))
    assert len(r.curve) == 6  # 2 frames per epoch, 3 epochs
    with pytest.raises(ValueError):
        _ft(min_steps=-1)


def test_finetune_config_validation():
    with pytest.raises(ValueError):
        FinetuneConfig(label_fraction=0.0)
    with pytest.raises(ValueError):
        FinetuneConfig(init="imagenet")
    with pytest.raises(ValueError):
        finetune([], [], SPEC, ENC, _ft(init="from_checkpoint"))


# -- harnesses ---------------------------------------------------------------------

def test_data_efficiency_table_dimensions(frames):
    enc = build_detector(SPEC, ENC, _ft()).encoder.state_dict()
    results = {}
    rows, summary = data_efficiency_harness(frames, frames[:1], SPEC, ENC, _ft(), {0: enc},
                                            fractions=(0.5, 1.0), seeds=(0,), results=results)
    assert len(rows) == 2 * 2 and len(results) == 4
    assert set(summary["table"]) == {"0.5", "1"}
    assert isinstance(summary["pretrained_below_scratch"], list)


def test_robustness_zero_rows_equal_clean_and_dimensions(tmp_path):
    sc = two_agent_scene([moving_object(0, 8.0, 3.0, 6.0), moving_object(1, -6.0, -9.0, 0.0)])
    items = [(sc, 1.0), (sc, 2.0)]
    models = {"scratch": build_detector(SPEC, ENC, _ft(seed=1)),
              "pretrained": build_detector(SPEC, ENC, _ft(seed=2))}
    rows, summary = robustness_harness(models, items, ENC, _ft(score_threshold=0.3))
    assert len(rows) == (3 + 3) * 2
    assert summary["zero_rows_match_clean"] is True
    write_csv(tmp_path / "r.csv", rows)
    header = (tmp_path / "r.csv").read_text().splitlines()[0].split(",")
    assert header[:5] == ["experiment", "seed", "model", "setting", "level"]
    assert header[5:] == metric_columns()


def test_content_hash_is_git_compatible():
    assert git_blob_hash(b"hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a"
    assert content_hash(b"a", b"b") != content_hash(b"b", b"a")
