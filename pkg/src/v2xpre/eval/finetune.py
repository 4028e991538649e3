"""Supervised finetuning of the intermediate-fusion detector, and its evaluation."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from v2xpre.bevgrid import BevSpec
from v2xpre.coopre.model import EncoderConfig, pillarize
from v2xpre.coopre.pretrain import PretrainAbort, crop_bounds
from v2xpre.eval.detector import Detector, agent_clouds, detect, encode_targets
from v2xpre.eval.metrics import DEFAULT_BUCKETS, compute_ap, range_bucketed_ap
from v2xpre.geometry import AugmentParams, PointCloud
from v2xpre.nn import checkpoint
from v2xpre.nn import tensor as T
from v2xpre.nn.optim import adamw_step, cosine_lr
from v2xpre.seeding import component_rng

INITS = ("scratch", "from_checkpoint")


@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 3
    min_steps: int = 0  # small label fractions train for extra epochs up to this many steps
    batch_size: int = 1
    base_lr: float = 0.005
    min_lr: float = 0.0
    weight_decay: float = 1e-2
    seed: int = 0
    init: str = "scratch"
    label_fraction: float = 1.0
    neg_ratio: int = 4
    pos_radius: int = 1
    reg_weight: float = 2.0
    min_negatives: int = 16
    augment: bool = True
    score_threshold: float = 0.1
    nms_iou: float = 0.1
    iou_thresholds: tuple = (0.5, 0.7)
    z_min: float = -3.0
    z_max: float = 5.0

    def __post_init__(self):
        if not 0 < self.label_fraction <= 1:
            raise ValueError("label_fraction must be in (0, 1]")
        if self.init not in INITS:
            raise ValueError(f"init must be one of {INITS}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.min_steps < 0:
            raise ValueError("min_steps must be >= 0")
        object.__setattr__(self, "iou_thresholds", tuple(self.iou_thresholds))


def label_subset(n: int, fraction: float, seed: int) -> np.ndarray:
    """Nested subsets: the first round(fraction * n) entries of one seeded permutation."""
    perm = component_rng(seed, "labels").permutation(n)
    k = max(1, int(math.floor(fraction * n + 0.5)))
    return np.sort(perm[:k])


def augment_scene(clouds, boxes, a: AugmentParams):
    """Apply one shared scale/rotate/flip to every agent cloud and every box."""
    M = a.point_transform()
    clouds = [PointCloud(c.points @ M.T, c.provenance) for c in clouds]
    out = []
    for b in boxes:
        yaw = b.yaw + a.yaw
        if a.flip_x:
            yaw = -yaw
        if a.flip_y:
            yaw = math.pi - yaw
        out.append(replace(b, center=M @ b.center,
                           size=(b.size[0] * a.scale, b.size[1] * a.scale, b.size[2] * a.scale),
                           yaw=yaw))
    return clouds, out


def frame_inputs(frame, spec: BevSpec, enc_cfg: EncoderConfig, cfg: FinetuneConfig, rng,
                 augment: bool = False):
    """Per-agent pillars (ego first) and ego-frame boxes for one frame."""
    bounds = crop_bounds(spec, cfg.z_min, cfg.z_max)
    clouds = agent_clouds(frame, bounds)
    boxes = list(frame.gt_boxes)
    if augment:
        a = AugmentParams.sample(rng, downsample=False)
        clouds, boxes = augment_scene(clouds, boxes, a)
    pillars = [pillarize(c.points, c.provenance, spec, enc_cfg.max_points_per_pillar, rng)
               for c in clouds]
    return pillars, boxes


def in_grid(boxes, spec: BevSpec):
    return [b for b in boxes
            if spec.x_min <= b.center[0] < spec.x_max and spec.y_min <= b.center[1] < spec.y_max]


def detection_loss(model: Detector, pillars, boxes, cfg: FinetuneConfig, rng):
    """BCE on positives plus sampled negatives, smooth-L1 on positives, per positive."""
    spec = model.spec
    out = model(pillars)
    pi, pj, reg, ignore = encode_targets(boxes, spec, cfg.pos_radius)
    n_cells = spec.X * spec.Y
    pos_flat = pi * spec.Y + pj
    excluded = np.zeros(n_cells, dtype=bool)
    excluded[pos_flat] = True
    excluded[ignore] = True
    candidates = np.nonzero(~excluded)[0]
    n_neg = min(len(candidates), max(cfg.neg_ratio * len(pos_flat), cfg.min_negatives))
    neg_flat = np.sort(rng.choice(candidates, size=n_neg, replace=False))
    sel = np.concatenate([pos_flat, neg_flat])
    labels = np.concatenate([np.ones(len(pos_flat)), np.zeros(len(neg_flat))])
    rows = T.gather_cells(out, sel // spec.Y, sel % spec.Y)
    logits = T.slice_axis(rows, 0, axis=1)
    norm = 1.0 / max(len(pos_flat), 1)
    loss = T.mul(T.bce_with_logits(logits, labels), norm)
    if len(pos_flat):
        pred_reg = T.slice_axis(rows, np.arange(len(pos_flat)), axis=0)
        pred_reg = T.slice_axis(pred_reg, slice(1, 7), axis=1)
        loss = T.add(loss, T.mul(T.smooth_l1(pred_reg, reg), cfg.reg_weight * norm))
    return loss


@dataclass
class FinetuneResult:
    state: dict
    metrics: dict
    curve: list
    config: dict

    def save(self, path):
        checkpoint.save(path, self.state, "finetuned-model", self.config,
                        {"steps": len(self.curve), "metrics": self.metrics,
                         "final_loss": self.curve[-1][2] if self.curve else None})


def build_detector(spec, enc_cfg, cfg: FinetuneConfig, init_state=None) -> Detector:
    model = Detector(enc_cfg, spec, component_rng(cfg.seed, "init", 2))
    if cfg.init == "from_checkpoint":
        if init_state is None:
            raise ValueError("init=from_checkpoint needs an encoder state")
        model.encoder.load_state_dict(init_state)
    return model


def train_detector(train_frames, spec, enc_cfg, cfg: FinetuneConfig, init_state=None, log=None):
    model = build_detector(spec, enc_cfg, cfg, init_state)
    params = model.parameters()
    subset = label_subset(len(train_frames), cfg.label_fraction, cfg.seed)
    n = len(subset)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    epochs = max(cfg.epochs, math.ceil(cfg.min_steps / steps_per_epoch))
    total = epochs * steps_per_epoch
    curve, step = [], 0
    for epoch in range(epochs):
        order = subset[component_rng(cfg.seed, "ft-shuffle", epoch).permutation(n)]
        for b in range(steps_per_epoch):
            batch = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            lr = cosine_lr(step, total, cfg.base_lr, cfg.min_lr)
            try:
                losses = []
                for idx in batch:
                    rng = component_rng(cfg.seed, "ft-sample", epoch, int(idx))
                    pillars, boxes = frame_inputs(train_frames[idx], spec, enc_cfg, cfg, rng,
                                                  augment=cfg.augment)
                    losses.append(detection_loss(model, pillars, in_grid(boxes, spec), cfg, rng))
                loss = T.mul(T.sum_over_axis(T.stack(losses)), 1.0 / len(losses))
                T.backward(loss, params)
            except T.NonFiniteError as e:
                raise PretrainAbort(f"non-finite value at finetune step {step}: {e}",
                                    {"step": step, "epoch": epoch,
                                     "frames": [int(i) for i in batch]}) from e
            adamw_step(params, lr, weight_decay=cfg.weight_decay)
            curve.append((step, lr, loss.item()))
            if log:
                log(step, lr, loss.item())
            step += 1
    return model, curve


def predict(model: Detector, frames, enc_cfg, cfg: FinetuneConfig):
    dets = []
    for k, f in enumerate(frames):
        pillars, _ = frame_inputs(f, model.spec, enc_cfg, cfg, component_rng(cfg.seed, "eval", k))
        dets.append(detect(model, pillars, cfg.score_threshold, cfg.nms_iou))
    return dets


def evaluate(model: Detector, frames, enc_cfg, cfg: FinetuneConfig, buckets=DEFAULT_BUCKETS):
    """Overall and per-bucket AP at each configured IoU threshold."""
    dets = predict(model, frames, enc_cfg, cfg)
    gts = [in_grid(f.gt_boxes, model.spec) for f in frames]
    return score_detections(dets, gts, cfg.iou_thresholds, buckets)


def score_detections(dets, gts, iou_thresholds=(0.5, 0.7), buckets=DEFAULT_BUCKETS):
    metrics = {}
    for thr in iou_thresholds:
        key = f"{thr:g}"
        metrics[f"ap@{key}"] = compute_ap(dets, gts, thr)
        metrics[f"buckets@{key}"] = range_bucketed_ap(dets, gts, thr, buckets)
    return metrics


def finetune(train_frames, test_frames, spec: BevSpec, enc_cfg: EncoderConfig,
             cfg: FinetuneConfig, init_state=None, log=None) -> FinetuneResult:
    """Train on a seeded label fraction of ``train_frames``; report AP on ``test_frames``."""
    model, curve = train_detector(train_frames, spec, enc_cfg, cfg, init_state, log)
    metrics = evaluate(model, test_frames, enc_cfg, cfg)
    echo = {"finetune": asdict(cfg), "encoder": asdict(enc_cfg), "bev": asdict(spec)}
    return FinetuneResult(model.state_dict(), metrics, curve, echo)
