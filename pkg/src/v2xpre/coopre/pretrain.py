"""Label-free cooperative reconstruction pretraining loop."""
from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from v2xpre.bevgrid import (BevSpec, build_occupancy, normalize_targets, sample_mask,
                            split_cloud)
from v2xpre.coopre.loss import recon_loss
from v2xpre.coopre.model import EncoderConfig, PillarEncoder, Pillars, ReconDecoder, pillarize
from v2xpre.fusion import crop_range, early_fuse
from v2xpre.geometry import AugmentParams, augment
from v2xpre.nn import checkpoint
from v2xpre.nn import tensor as T
from v2xpre.nn.optim import adamw_step, cosine_lr
from v2xpre.seeding import component_rng

DEFAULT_Z_RANGE = (-3.0, 5.0)


@dataclass(frozen=True)
class PretrainConfig:
    mask_ratio: float = 0.7
    k_points: int = 20
    epochs: int = 15
    batch_size: int = 4
    base_lr: float = 0.002
    min_lr: float = 0.0
    weight_decay: float = 1e-2
    seed: int = 0
    ego_only: bool = False
    augment: bool = True
    z_center: float = 0.0
    z_scale: float = 4.0
    target_cap: int = 256
    z_min: float = DEFAULT_Z_RANGE[0]
    z_max: float = DEFAULT_Z_RANGE[1]

    def __post_init__(self):
        if not 0 < self.mask_ratio < 1:
            raise ValueError("mask_ratio must be in (0, 1)")
        if self.k_points < 1:
            raise ValueError("k_points must be >= 1")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


class PretrainAbort(RuntimeError):
    """Non-finite loss; ``diagnostics`` holds step, frames and offending values."""

    def __init__(self, message, diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class Sample:
    pillars: Pillars
    cells: list
    plan: object
    n_non_empty: int


def crop_bounds(spec: BevSpec, z_min: float, z_max: float):
    return ((spec.x_min, spec.x_max), (spec.y_min, spec.y_max), (z_min, z_max))


def strip_labels(frame):
    """The pretraining loop only ever sees label-free frames."""
    return replace(frame, gt_boxes=())


def prepare_sample(frame, spec: BevSpec, enc_cfg: EncoderConfig, cfg: PretrainConfig,
                   rng: np.random.Generator) -> Sample:
    """fuse -> crop -> augment -> occupancy -> mask -> split -> normalize -> pillarize."""
    fc = early_fuse(frame, agents=() if cfg.ego_only else None)
    fc = crop_range(fc, crop_bounds(spec, cfg.z_min, cfg.z_max))
    if cfg.augment:
        params = AugmentParams.sample(rng)
        fc = fc.with_cloud(augment(fc.cloud, params, rng))
    occ = build_occupancy(spec, fc)
    plan = sample_mask(occ, cfg.mask_ratio, rng)
    visible, plan = split_cloud(fc, plan, occ)
    normalize_targets(plan, spec, cfg.z_center, cfg.z_scale, cfg.target_cap, rng)
    pillars = pillarize(visible.points, visible.cloud.provenance, spec,
                        enc_cfg.max_points_per_pillar, rng, cfg.z_scale)
    return Sample(pillars, list(plan.masked), plan, len(occ.non_empty))


def sample_loss(encoder, decoder, s: Sample):
    if not s.cells:
        return T.Tensor(0.0)
    bev = encoder(s.pillars)
    pred = decoder(bev, s.cells)
    return recon_loss(s.plan, s.cells, pred)


@dataclass
class PretrainResult:
    encoder_state: dict
    curve: list  # (step, lr, loss)
    config: dict
    n_parameters: int
    masked_grids: list = field(default_factory=list)  # per processed sample

    def save(self, path):
        meta = {"steps": len(self.curve), "final_loss": self.curve[-1][2] if self.curve else None,
                "n_parameters": self.n_parameters}
        checkpoint.save(path, self.encoder_state, "pretrained-encoder", self.config, meta)

    def write_curve(self, path):
        write_curve(path, self.curve)


def write_curve(path, curve):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "lr", "loss"])
        for step, lr, loss in curve:
            w.writerow([step, repr(float(lr)), repr(float(loss))])


def build_models(spec, enc_cfg, cfg):
    encoder = PillarEncoder(enc_cfg, spec, component_rng(cfg.seed, "init", 0))
    decoder = ReconDecoder(enc_cfg.bev_channels, cfg.k_points, component_rng(cfg.seed, "init", 1))
    return encoder, decoder


def pretrain(frames, spec: BevSpec, enc_cfg: EncoderConfig, cfg: PretrainConfig,
             jobs: int = 1, log=None, config_echo: dict | None = None) -> PretrainResult:
    """Masked BEV reconstruction over ``frames``; returns the encoder weights and curve.

    Deterministic under ``cfg.seed``. Preprocessing may run on ``jobs``
    threads; results are consumed in submission order.
    """
    frames = [strip_labels(f) for f in frames]
    if not frames:
        raise ValueError("pretraining needs a non-empty dataset")
    encoder, decoder = build_models(spec, enc_cfg, cfg)
    params = encoder.parameters() + decoder.parameters()
    n = len(frames)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    curve, masked_counts = [], []
    step = 0
    pool = ThreadPoolExecutor(jobs) if jobs > 1 else None

    def prep(args):
        epoch, idx = args
        return prepare_sample(frames[idx], spec, enc_cfg, cfg,
                              component_rng(cfg.seed, "sample", epoch, idx))

    try:
        for epoch in range(cfg.epochs):
            order = component_rng(cfg.seed, "shuffle", epoch).permutation(n)
            for b in range(steps_per_epoch):
                batch = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
                items = [(epoch, int(i)) for i in batch]
                samples = list(pool.map(prep, items)) if pool else [prep(a) for a in items]
                lr = cosine_lr(step, total, cfg.base_lr, cfg.min_lr)
                try:
                    losses = [sample_loss(encoder, decoder, s) for s in samples]
                    loss = T.mul(losses[0] if len(losses) == 1 else T.sum_over_axis(T.stack(losses)),
                                 1.0 / len(losses))
                    T.backward(loss, params)
                    for p in params:
                        T._finite(p.grad, "gradient")
                except T.NonFiniteError as e:
                    raise PretrainAbort(
                        f"non-finite value at step {step}: {e}",
                        {"step": step, "epoch": epoch, "frames": [int(i) for i in batch],
                         "masked_grids": [len(s.cells) for s in samples],
                         "losses": [float(getattr(l, "item", lambda: float("nan"))())
                                    for l in locals().get("losses", [])]}) from e
                adamw_step(params, lr, weight_decay=cfg.weight_decay)
                curve.append((step, lr, loss.item()))
                masked_counts.extend(len(s.cells) for s in samples)
                if log:
                    log(step, lr, loss.item())
                step += 1
    finally:
        if pool:
            pool.shutdown()
    echo = {"pretrain": asdict(cfg), "encoder": asdict(enc_cfg), "bev": asdict(spec)}
    if config_echo:
        echo["run"] = config_echo
    return PretrainResult(encoder.state_dict(), curve, echo, encoder.n_parameters(), masked_counts)
