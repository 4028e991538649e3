"""Intermediate-fusion detector: per-agent pillar encoding, ego-query attention, conv head."""
from __future__ import annotations

import math

import numpy as np

from v2xpre.bevgrid import BevSpec
from v2xpre.boxes import Box3D, Detection, nms
from v2xpre.coopre.model import EncoderConfig, PillarEncoder
from v2xpre.fusion import agent_order, crop_range, project_agent, FusedCloud
from v2xpre.nn import tensor as T
from v2xpre.nn.layers import Conv2d, Module, Parameter
from v2xpre.nn.tensor import sigmoid_np

HEAD_CHANNELS = 7  # objectness, dx, dy, log l, log w, sin yaw, cos yaw
CLASS_PRIORS = {  # length, width, height, center z relative to the ego sensor
    "car": (4.35, 1.85, 1.55, -1.8 + 0.775),
    "truck": (8.5, 2.5, 3.25, -1.8 + 1.625),
}
YAW_CUT = -math.pi / 4  # canonical yaw range (YAW_CUT, YAW_CUT + pi]


def canonical_yaw(yaw: float) -> float:
    """BEV rectangles are symmetric under a half turn; pick the representative
    in (-pi/4, 3pi/4] so neither road axis sits on the wrap-around."""
    y = (yaw - YAW_CUT) % math.pi
    if y == 0.0:
        y = math.pi
    return y + YAW_CUT


class AttentionFuse(Module):
    """Per-cell single-head scaled dot-product attention over agents, ego token as query."""

    def __init__(self, channels: int):
        eye = np.eye(channels)
        self.wq = Parameter(eye.copy())
        self.wk = Parameter(eye.copy())
        self.wv = Parameter(eye.copy())
        self.channels = channels

    def __call__(self, feats):
        return attention_fuse(feats, self.wq, self.wk, self.wv)


def attention_fuse(feats, wq=None, wk=None, wv=None):
    """Fuse a list of A same-shape (X, Y, C) maps; agent 0 is the ego."""
    feats = [T.as_tensor(f) for f in feats]
    if not feats:
        raise ValueError("attention_fuse needs at least one agent")
    shape = feats[0].shape
    if any(f.shape != shape for f in feats) or len(shape) != 3:
        raise T.ShapeError(f"attention_fuse: mismatched agent feature shapes "
                           f"{[f.shape for f in feats]}")
    C = shape[2]
    eye = np.eye(C)
    wq = eye if wq is None else wq
    wk = eye if wk is None else wk
    wv = eye if wv is None else wv
    F = T.stack(feats, axis=0)  # (A, X, Y, C)
    q = T.matmul(feats[0], wq)  # (X, Y, C)
    k = T.matmul(F, wk)
    v = T.matmul(F, wv)
    scores = T.mul(T.sum_over_axis(T.mul(k, q), axis=3), 1.0 / math.sqrt(C))  # (A, X, Y)
    attn = T.softmax_over_axis(scores, axis=0)
    out = T.sum_over_axis(T.mul(v, T.reshape(attn, attn.shape + (1,))), axis=0)
    return out


class DetHead(Module):
    def __init__(self, channels: int, rng):
        self.conv1 = Conv2d(channels, channels, rng)
        self.conv2 = Conv2d(channels, HEAD_CHANNELS, rng)

    def __call__(self, bev):
        return self.conv2(T.relu(self.conv1(bev)))


def det_head(head: DetHead, bev):
    """Per-cell (objectness logit, dx, dy, log l, log w, sin yaw, cos yaw)."""
    return head(bev)


class Detector(Module):
    def __init__(self, enc_cfg: EncoderConfig, spec: BevSpec, rng):
        self.encoder = PillarEncoder(enc_cfg, spec, rng)
        self.fuse = AttentionFuse(enc_cfg.bev_channels)
        self.head = DetHead(enc_cfg.bev_channels, rng)
        self.spec = spec

    def __call__(self, agent_pillars):
        feats = [self.encoder(p) for p in agent_pillars]
        return self.head(self.fuse(feats))


def agent_clouds(frame, bounds) -> list:
    """Each agent's cloud projected into the ego frame and cropped, ego first."""
    out = []
    for label, a in enumerate(agent_order(frame)):
        cloud = project_agent(frame, a, label)
        fc = crop_range(FusedCloud.from_cloud(cloud, [label]), bounds)
        out.append(fc.cloud)
    return out


def encode_targets(boxes, spec: BevSpec, radius: int = 0):
    """Positive cells and their regression targets.

    Every cell within Chebyshev ``radius`` of an observed box's center cell
    is positive and regresses that box; a cell claimed by several boxes goes
    to the nearest center. Returns (i, j, targets (P, 6), ignore_flat) where
    ``ignore_flat`` holds the cells around unobserved boxes, excluded from
    negative sampling.
    """
    claims = []  # (squared distance, box index, i, j)
    ignore = set()
    for n, b in enumerate(boxes):
        x, y = b.center[0], b.center[1]
        ci, cj, inside = spec.grid_indices(np.array([[x, y, 0.0]]))
        if not inside[0]:
            continue
        for i in range(max(0, ci[0] - radius), min(spec.X, ci[0] + radius + 1)):
            for j in range(max(0, cj[0] - radius), min(spec.Y, cj[0] + radius + 1)):
                if b.unobserved:
                    ignore.add(i * spec.Y + j)
                else:
                    cx, cy = spec.cell_center(i, j)
                    claims.append(((x - cx) ** 2 + (y - cy) ** 2, n, i, j))
    claims.sort()
    ii, jj, tg, taken = [], [], [], set()
    prior = CLASS_PRIORS["car"]
    for _, n, i, j in claims:
        if (i, j) in taken:
            continue
        taken.add((i, j))
        b = boxes[n]
        cx, cy = spec.cell_center(i, j)
        yaw = canonical_yaw(b.yaw)
        ii.append(i)
        jj.append(j)
        tg.append([(b.center[0] - cx) / spec.cell, (b.center[1] - cy) / spec.cell,
                   math.log(b.size[0] / prior[0]), math.log(b.size[1] / prior[1]),
                   math.sin(yaw), math.cos(yaw)])
    ignore -= {i * spec.Y + j for i, j in taken}
    return (np.array(ii, dtype=np.int64), np.array(jj, dtype=np.int64),
            np.array(tg, dtype=np.float64).reshape(-1, 6),
            np.array(sorted(ignore), dtype=np.int64))


def decode_detections(head_out, spec: BevSpec, score_threshold: float = 0.5, cls: str = "car",
                      max_candidates: int | None = None):
    """Cells with sigmoid(objectness) >= threshold become boxes in the ego frame.

    ``max_candidates`` keeps only the highest-scoring cells (row-major
    order breaks ties).
    """
    if not 0 < score_threshold < 1:
        raise ValueError("score_threshold must be in (0, 1)")
    data = head_out.data if isinstance(head_out, T.Tensor) else np.asarray(head_out)
    with np.errstate(over="ignore"):
        scores = sigmoid_np(data[..., 0])
    ii, jj = np.nonzero(scores >= score_threshold)
    if max_candidates is not None and len(ii) > max_candidates:
        keep = np.sort(np.argsort(-scores[ii, jj], kind="stable")[:max_candidates])
        ii, jj = ii[keep], jj[keep]
    l0, w0, h0, z0 = CLASS_PRIORS[cls]
    dets = []
    for i, j in zip(ii, jj):
        v = data[i, j]
        cx, cy = spec.cell_center(i, j)
        box = Box3D((cx + v[1] * spec.cell, cy + v[2] * spec.cell, z0),
                    (l0 * math.exp(np.clip(v[3], -3, 3)), w0 * math.exp(np.clip(v[4], -3, 3)), h0),
                    math.atan2(v[5], v[6]), cls)
        dets.append(Detection(box, float(scores[i, j])))
    return dets


def detect(model: Detector, agent_pillars, score_threshold=0.1, nms_iou=0.1, max_candidates=256):
    with T.no_grad():
        out = model(agent_pillars)
    return nms(decode_detections(out, model.spec, score_threshold, max_candidates=max_candidates),
               nms_iou)
