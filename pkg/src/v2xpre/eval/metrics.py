"""Average precision with greedy one-to-one matching and range buckets."""
from __future__ import annotations

import math

import numpy as np

from v2xpre.boxes import Box3D, Detection, iou_matrix

DEFAULT_BUCKETS = ((0.0, 30.0), (30.0, 50.0), (50.0, 100.0))


def _as_frames(dets, gts):
    """Accept one frame (lists of Detection / Box3D) or a list of frames."""
    if dets and isinstance(dets[0], Detection) or gts and isinstance(gts[0], Box3D):
        return [list(dets)], [list(gts)]
    if not dets and not gts:
        return [[]], [[]]
    if not dets:
        dets = [[] for _ in gts]
    if not gts:
        gts = [[] for _ in dets]
    if len(dets) != len(gts):
        raise ValueError("detections and ground truth cover different numbers of frames")
    return [list(d) for d in dets], [list(g) for g in gts]


def match_detections(dets_frames, gts_frames, iou_threshold):
    """Greedy matching by descending score across frames.

    Returns (scores, is_tp, n_gt) over the detections that count. A
    detection whose best unmatched partner is an unobserved ground truth
    is dropped rather than counted as a false positive.
    """
    items = []
    for f, dets in enumerate(dets_frames):
        for k, d in enumerate(dets):
            items.append((-d.score, f, k))
    items.sort()
    ious = [iou_matrix([d.box for d in dets], list(gts))
            for dets, gts in zip(dets_frames, gts_frames)]
    matched = [np.zeros(len(g), dtype=bool) for g in gts_frames]
    scores, tp = [], []
    for neg_score, f, k in items:
        gts = gts_frames[f]
        best, best_iou = -1, iou_threshold
        for g in range(len(gts)):
            if matched[f][g]:
                continue
            v = ious[f][k, g]
            if v >= best_iou and (best < 0 or v > best_iou):
                best, best_iou = g, v
        if best >= 0:
            matched[f][best] = True
            if gts[best].unobserved:
                continue
            scores.append(-neg_score)
            tp.append(True)
        else:
            scores.append(-neg_score)
            tp.append(False)
    n_gt = sum(1 for gts in gts_frames for g in gts if not g.unobserved)
    return np.array(scores), np.array(tp, dtype=bool), n_gt


def average_precision(is_tp, n_gt, scores=None):
    """All-point interpolated AP (area under the precision envelope).

    With ``scores`` (descending), detections of equal score enter the PR
    curve as one step, so their relative order does not matter.
    """
    if n_gt == 0:
        return None
    if len(is_tp) == 0:
        return 0.0
    tp = np.cumsum(is_tp)
    fp = np.cumsum(~is_tp)
    if scores is not None and len(scores):
        last_of_group = np.append(scores[1:] != scores[:-1], True)
        tp, fp = tp[last_of_group], fp[last_of_group]
    recall = np.concatenate([[0.0], tp / n_gt])
    precision = np.concatenate([[0.0], tp / np.maximum(tp + fp, 1)])
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    return float(np.sum((recall[1:] - recall[:-1]) * envelope[1:]))


def compute_ap(dets, gts, iou_threshold: float = 0.5):
    """AP at a BEV IoU threshold; ``None`` when there is no observed ground truth."""
    dets_frames, gts_frames = _as_frames(dets, gts)
    scores, tp, n_gt = match_detections(dets_frames, gts_frames, iou_threshold)
    return average_precision(tp, n_gt, scores)


def bucket_of(r: float, buckets=DEFAULT_BUCKETS):
    for k, (lo, hi) in enumerate(buckets):
        if lo <= r < hi:
            return k
    return None


def range_bucketed_ap(dets, gts, iou_threshold: float = 0.5, buckets=DEFAULT_BUCKETS):
    """AP per range bucket (right-open); buckets without ground truth map to ``None``."""
    for (a0, a1), (b0, b1) in zip(buckets, buckets[1:]):
        if b0 < a1:
            raise ValueError("range buckets must be disjoint and ascending")
    dets_frames, gts_frames = _as_frames(dets, gts)
    out = {}
    for k, (lo, hi) in enumerate(buckets):
        d = [[x for x in fr if bucket_of(x.box.bev_range, buckets) == k] for fr in dets_frames]
        g = [[x for x in fr if bucket_of(x.bev_range, buckets) == k] for fr in gts_frames]
        out[bucket_label(lo, hi)] = compute_ap(d, g, iou_threshold)
    return out


def bucket_label(lo, hi) -> str:
    return f"{lo:g}-{hi:g}m"


def fmt_ap(v) -> str:
    return "undefined" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.6f}"
