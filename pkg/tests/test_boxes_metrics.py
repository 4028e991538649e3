import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import ap_all_point, monte_carlo_iou
from v2xpre import _kernels_py, kernels
from v2xpre.boxes import Box3D, Detection, iou_matrix, nms, rotated_iou, wrap_angle
from v2xpre.eval.metrics import (average_precision, bucket_of, compute_ap, fmt_ap,
                                 range_bucketed_ap)
from v2xpre.geometry import Pose


def box(x, y, l=1.0, w=1.0, yaw=0.0, **kw):
    return Box3D((x, y, 0.0), (l, w, 1.0), yaw, **kw)


def random_box(rng, spread=2.0):
    return box(*rng.uniform(-spread, spread, 2), *rng.uniform(0.5, 5.0, 2),
               rng.uniform(-np.pi, np.pi))


# -- boxes ---------------------------------------------------------------------

def test_wrap_angle_range():
    assert wrap_angle(-np.pi) == np.pi
    assert wrap_angle(3 * np.pi) == pytest.approx(np.pi)
    assert wrap_angle(0.5 + 4 * np.pi) == pytest.approx(0.5)


def test_box_validation():
    with pytest.raises(ValueError):
        box(0, 0, l=0.0)
    with pytest.raises(ValueError):
        Detection(box(0, 0), 1.5)
    with pytest.raises(ValueError):
        Detection(box(0, 0), float("nan"))


def test_bev_corners_counter_clockwise():
    c = box(1, 2, 4, 2, 0.3).bev_corners()
    x, y = c[:, 0], c[:, 1]
    assert 0.5 * np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y) == pytest.approx(8.0)


def test_box_transform_matches_pose():
    b = box(3, 1, yaw=0.2)
    p = Pose.from_xyz_yaw(10, -2, 0.5, 0.4)
    t = b.transformed(p)
    assert t.yaw == pytest.approx(0.6)
    np.testing.assert_allclose(t.center, p.rotation @ b.center + p.translation)


# -- rotated IoU -----------------------------------------------------------------

def test_iou_analytic_cases():
    assert rotated_iou(box(0, 0), box(0, 0)) == 1.0
    assert rotated_iou(box(0, 0), box(5, 0)) == 0.0
    assert rotated_iou(box(0, 0), box(0.5, 0)) == pytest.approx(1 / 3, abs=1e-12)
    # square rotated 45 degrees inside a larger axis-aligned one
    assert rotated_iou(box(0, 0, 2, 2), box(0, 0, 2 / math.sqrt(2), 2 / math.sqrt(2),
                                              np.pi / 4)) == pytest.approx(0.5, abs=1e-12)


def test_iou_touching_edges_is_zero():
    assert rotated_iou(box(0, 0), box(1, 0)) == 0.0


def test_iou_degenerate_box_raises():
    flat = box(0, 0)
    object.__setattr__(flat, "size", (0.0, 1.0, 1.0))  # bypass constructor validation
    with pytest.raises(ValueError):
        rotated_iou(box(0, 0), flat)


def test_iou_matches_monte_carlo():
    rng = np.random.default_rng(2024)
    for _ in range(20):
        a, b = random_box(rng), random_box(rng)
        assert abs(rotated_iou(a, b) - monte_carlo_iou(a, b, 200_000, rng)) < 0.01


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_iou_symmetry_and_yaw_invariance(seed):
    rng = np.random.default_rng(seed)
    a, b = random_box(rng), random_box(rng)
    ab, ba = rotated_iou(a, b), rotated_iou(b, a)
    assert abs(ab - ba) < 1e-12 and 0.0 <= ab <= 1.0
    p = Pose.from_xyz_yaw(*rng.uniform(-50, 50, 2), 0.0, rng.uniform(-np.pi, np.pi))
    assert abs(rotated_iou(a.transformed(p), b.transformed(p)) - ab) < 1e-9


def test_iou_matrix_agrees_with_pairwise():
    rng = np.random.default_rng(7)
    A = [random_box(rng) for _ in range(6)]
    B = [random_box(rng) for _ in range(5)]
    M = iou_matrix(A, B)
    for i, a in enumerate(A):
        for j, b in enumerate(B):
            assert M[i, j] == pytest.approx(rotated_iou(a, b), abs=1e-12)
    assert iou_matrix([], B).shape == (0, 5)


def test_compiled_and_python_polygon_kernels_agree():
    rng = np.random.default_rng(3)
    ca = np.stack([random_box(rng).bev_corners() for _ in range(15)])
    cb = np.stack([random_box(rng).bev_corners() for _ in range(12)])
    np.testing.assert_allclose(kernels.rect_intersection_areas(ca, cb),
                               _kernels_py.rect_intersection_areas(ca, cb), atol=1e-12)


# -- NMS -----------------------------------------------------------------------

def test_nms_identity_without_overlap():
    dets = [Detection(box(10 * k, 0), 0.5 + 0.1 * k) for k in range(4)]
    assert nms(dets, 0.5) == sorted(dets, key=lambda d: -d.score)


def test_nms_keeps_higher_score_and_respects_order():
    a, b = Detection(box(0, 0), 0.8), Detection(box(0, 0), 0.9)
    assert nms([a, b], 0.5) == [b]
    c = Detection(box(0.05, 0), 0.9)
    assert nms([b, c], 0.5) == [b]  # tie: earlier index wins
    with pytest.raises(ValueError):
        nms([a], 1.0)


# -- AP --------------------------------------------------------------------------

def test_ap_perfect_and_empty():
    gts = [box(0, 0), box(10, 0)]
    perfect = [Detection(g, 0.9) for g in gts]
    assert compute_ap(perfect, gts) == 1.0
    assert compute_ap([], gts) == 0.0
    assert compute_ap([], []) is None


def test_ap_hand_computed_half():
    gt = [box(0, 0)]
    dets = [Detection(box(20, 0), 0.9), Detection(box(0, 0), 0.8)]
    assert compute_ap(dets, gt) == pytest.approx(0.5)


def test_ap_matches_explicit_envelope_oracle():
    rng = np.random.default_rng(11)
    for _ in range(50):
        flags = rng.random(int(rng.integers(1, 30))) < 0.5
        n_gt = int(flags.sum() + rng.integers(0, 4)) or 1
        assert average_precision(flags, n_gt) == pytest.approx(ap_all_point(flags, n_gt))


def test_ap_invariant_to_order_of_tied_scores():
    gts = [box(0, 0), box(10, 0)]
    dets = [Detection(box(0, 0), 0.7), Detection(box(30, 0), 0.7), Detection(box(10, 0), 0.5)]
    assert compute_ap(dets, gts) == compute_ap(dets[::-1], gts)


def test_unobserved_ground_truth_is_excluded():
    gts = [box(0, 0), box(10, 0, unobserved=True)]
    dets = [Detection(box(0, 0), 0.9), Detection(box(10, 0), 0.95)]
    # the match on the unobserved box neither helps nor hurts
    assert compute_ap(dets, gts) == 1.0
    assert compute_ap([], [box(0, 0, unobserved=True)]) is None


def test_ap_over_multiple_frames():
    frames_gt = [[box(0, 0)], [box(5, 5)]]
    frames_det = [[Detection(box(0, 0), 0.9)], [Detection(box(50, 5), 0.95)]]
    # ranked: FP (0.95), TP (0.9) -> recall 0.5 at precision 0.5
    assert compute_ap(frames_det, frames_gt) == pytest.approx(0.25)


def test_range_buckets_and_boundary():
    assert bucket_of(29.999) == 0 and bucket_of(30.0) == 1 and bucket_of(100.0) is None
    gts = [box(10, 0)]
    out = range_bucketed_ap([Detection(box(10, 0), 0.9)], gts)
    assert out == {"0-30m": 1.0, "30-50m": None, "50-100m": None}
    assert fmt_ap(None) == "undefined"
    with pytest.raises(ValueError):
        range_bucketed_ap([], gts, buckets=((0, 40), (30, 50)))


def test_bucket_union_equals_overall_when_matches_stay_in_bucket():
    gts = [box(10, 0), box(40, 0), box(70, 0)]
    dets = [Detection(box(10.1, 0), 0.9), Detection(box(40, 0.1), 0.8), Detection(box(70, 0), 0.7)]
    per = range_bucketed_ap(dets, gts)
    assert compute_ap(dets, gts) == 1.0 and set(per.values()) == {1.0}
