"""Data-efficiency and robustness experiment harnesses, plus their CSV/JSON outputs."""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import replace

import numpy as np

from v2xpre.eval.finetune import (FinetuneConfig, evaluate, finetune, in_grid, predict,
                                  score_detections)
from v2xpre.eval.metrics import DEFAULT_BUCKETS, bucket_label, fmt_ap
from v2xpre.seeding import component_rng
from v2xpre.simulator.lidar import inject_localization_error, inject_time_delay, render_frame

METRICS_VERSION = 1
IOU_NOTE = "AP uses BEV rotated-rectangle IoU, all-point interpolation"


def git_blob_hash(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def content_hash(*blobs: bytes) -> str:
    """Hash over the git-style blob hashes of every input, in order."""
    return git_blob_hash("\n".join(git_blob_hash(b) for b in blobs).encode())


def metric_columns(thresholds=(0.5, 0.7), buckets=DEFAULT_BUCKETS):
    cols = [f"ap@{t:g}" for t in thresholds]
    for t in thresholds:
        cols += [f"ap@{t:g}[{bucket_label(lo, hi)}]" for lo, hi in buckets]
    return cols


def flatten_metrics(metrics: dict, thresholds=(0.5, 0.7), buckets=DEFAULT_BUCKETS) -> dict:
    row = {f"ap@{t:g}": metrics[f"ap@{t:g}"] for t in thresholds}
    for t in thresholds:
        for lo, hi in buckets:
            lab = bucket_label(lo, hi)
            row[f"ap@{t:g}[{lab}]"] = metrics[f"buckets@{t:g}"][lab]
    return row


ROW_KEYS = ("experiment", "seed", "model", "setting", "level")


def write_csv(path, rows, thresholds=(0.5, 0.7), buckets=DEFAULT_BUCKETS):
    cols = list(ROW_KEYS) + metric_columns(thresholds, buckets)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([fmt_ap(r[c]) if c not in ROW_KEYS else r[c] for c in cols])


def write_summary(path, summary: dict):
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _mean(vals):
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else None


def data_efficiency_harness(train_frames, test_frames, spec, enc_cfg, ft_cfg: FinetuneConfig,
                            pretrained: dict, fractions=(0.2, 0.5, 0.8, 1.0), seeds=(0,),
                            log=None, results: dict | None = None):
    """Finetune scratch and pretrained encoders at each label fraction and seed.

    ``pretrained`` maps seed -> encoder state. Returns (rows, summary);
    rows has len(fractions) * 2 entries per seed. The summary holds the
    seed-averaged table and a flag listing fractions where the pretrained
    mean falls below scratch. When given, ``results`` collects every
    FinetuneResult keyed by (seed, model, fraction).
    """
    rows = []
    for seed in seeds:
        for frac in fractions:
            for model, init in (("scratch", "scratch"), ("pretrained", "from_checkpoint")):
                cfg = replace(ft_cfg, seed=seed, label_fraction=frac, init=init)
                res = finetune(train_frames, test_frames, spec, enc_cfg, cfg,
                               pretrained.get(seed) if init != "scratch" else None)
                row = {"experiment": "data-efficiency", "seed": seed, "model": model,
                       "setting": "label_fraction", "level": frac}
                row.update(flatten_metrics(res.metrics, cfg.iou_thresholds))
                rows.append(row)
                if results is not None:
                    results[(seed, model, frac)] = res
                if log:
                    log(row)
    table = {}
    for frac in fractions:
        for model in ("scratch", "pretrained"):
            sel = [r for r in rows if r["level"] == frac and r["model"] == model]
            table.setdefault(f"{frac:g}", {})[model] = {
                c: _mean(r[c] for r in sel) for c in metric_columns(ft_cfg.iou_thresholds)}
    below = [f for f, t in table.items()
             if None not in (t["pretrained"]["ap@0.5"], t["scratch"]["ap@0.5"])
             and t["pretrained"]["ap@0.5"] < t["scratch"]["ap@0.5"]]
    return rows, {"table": table, "pretrained_below_scratch": below}


def perturbed_frames(test_items, setting: str, level, seed: int):
    """Re-render each (scenario, t) test item under one perturbation level.

    ``setting`` is "localization" with ``level = (sigma_xy, sigma_yaw)`` or
    "delay" with ``level`` in seconds.
    """
    out = []
    for k, (scenario, t) in enumerate(test_items):
        if setting == "localization":
            sxy, syaw = level
            f = render_frame(scenario, t)
            f = inject_localization_error(f, sxy, syaw, component_rng(seed, "loc-noise", k))
        elif setting == "delay":
            f = inject_time_delay(scenario, t, level)
        else:
            raise ValueError(f"unknown perturbation {setting!r}")
        out.append(f)
    return out


def robustness_harness(models: dict, test_items, enc_cfg, ft_cfg: FinetuneConfig,
                       sigma_xy=(0.0, 0.2, 0.5), sigma_yaw=(0.0,), delays=(0.0, 0.1, 0.2),
                       seeds=(0,), log=None):
    """Evaluate every model on test frames re-rendered at each perturbation level.

    ``sigma_yaw`` is zipped with ``sigma_xy`` (a single value is broadcast).
    Returns (rows, summary); rows has (#localization + #delay levels) entries
    per model and seed. The summary records the clean metrics and whether
    every zero-perturbation row reproduced them exactly.
    """
    if len(sigma_yaw) == 1:
        sigma_yaw = tuple(sigma_yaw) * len(sigma_xy)
    if len(sigma_yaw) != len(sigma_xy):
        raise ValueError("sigma_yaw must have one entry or as many as sigma_xy")
    clean_frames = [render_frame(s, t) for s, t in test_items]
    spec = next(iter(models.values())).spec
    gts = [in_grid(f.gt_boxes, spec) for f in clean_frames]  # perturbations leave labels alone
    clean = {name: evaluate(m, clean_frames, enc_cfg, ft_cfg) for name, m in models.items()}
    levels = [("localization", (sx, sy)) for sx, sy in zip(sigma_xy, sigma_yaw)]
    levels += [("delay", d) for d in delays]
    rows, zero_ok = [], True
    for seed in seeds:
        for setting, level in levels:
            frames = perturbed_frames(test_items, setting, level, seed)
            for name, model in models.items():
                dets = predict(model, frames, enc_cfg, ft_cfg)
                metrics = score_detections(dets, gts, ft_cfg.iou_thresholds)
                label = f"{level[0]:g}/{level[1]:g}" if setting == "localization" else f"{level:g}"
                row = {"experiment": "robustness", "seed": seed, "model": name,
                       "setting": setting, "level": label}
                row.update(flatten_metrics(metrics, ft_cfg.iou_thresholds))
                rows.append(row)
                is_zero = level == (0.0, 0.0) if setting == "localization" else level == 0
                if is_zero and metrics != clean[name]:
                    zero_ok = False
                if log:
                    log(row)
    trend = {}
    for name in models:
        for setting in ("localization", "delay"):
            sel = [r for r in rows if r["model"] == name and r["setting"] == setting]
            labels = list(dict.fromkeys(r["level"] for r in sel))
            trend.setdefault(name, {})[setting] = {
                lab: _mean(r["ap@0.5"] for r in sel if r["level"] == lab) for lab in labels}
    return rows, {"clean": clean, "zero_rows_match_clean": zero_ok, "trend_ap@0.5": trend,
                  "levels": {"sigma_xy": list(sigma_xy), "sigma_yaw": list(sigma_yaw),
                             "delay": list(delays)}}


def summary_header(config_echo: dict, input_hash: str) -> dict:
    return {"format_version": METRICS_VERSION, "config": config_echo, "input_hash": input_hash,
            "iou": IOU_NOTE}
