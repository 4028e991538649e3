"""Command-line entry point: simulate, pretrain, finetune, eval, experiment, inspect."""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from v2xpre import __version__
from v2xpre.config import ConfigError, RunConfig, load_config
from v2xpre.coopre.pretrain import PretrainAbort, pretrain
from v2xpre.eval.detector import Detector
from v2xpre.eval.finetune import evaluate, finetune
from v2xpre.eval.harness import (content_hash, data_efficiency_harness, flatten_metrics,
                                 robustness_harness, summary_header, write_csv, write_summary)
from v2xpre.nn import checkpoint
from v2xpre.nn.checkpoint import CheckpointError
from v2xpre.nn.tensor import NonFiniteError
from v2xpre.seeding import component_rng
from v2xpre.simulator import PlacementError, ScenarioConfig, generate_scenario
from v2xpre.simulator.dataset import Dataset, FormatError, write_dataset

OUTPUT_ROOT_ENV = "V2XPRE_OUTPUT_ROOT"
EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def resolve_out(path: str, cfg: RunConfig) -> Path:
    p = Path(path)
    if p.is_absolute():
        return p
    root = cfg.output_root or os.environ.get(OUTPUT_ROOT_ENV, "")
    return Path(root) / p if root else p


def _say(msg):
    print(msg, flush=True)


def _config(args) -> RunConfig:
    return load_config(args.config, args.set)


def _dataset(path) -> Dataset:
    return Dataset(path)


def _check_model_config(header: dict, cfg: RunConfig, path):
    want = {"encoder": asdict(cfg.encoder), "bev": asdict(cfg.bev)}
    got = {k: header["config"].get(k) for k in want}
    if got != want:
        raise ConfigError(f"{path}: checkpoint encoder/bev config {got} differs from run config {want}")


def load_encoder_state(path, cfg: RunConfig):
    params, header = checkpoint.load(path)
    if header["role"] != "pretrained-encoder":
        raise CheckpointError(f"{path}: expected a pretrained-encoder checkpoint, got {header['role']}")
    _check_model_config(header, cfg, path)
    return params


def load_detector(path, cfg: RunConfig) -> Detector:
    params, header = checkpoint.load(path)
    if header["role"] != "finetuned-model":
        raise CheckpointError(f"{path}: expected a finetuned-model checkpoint, got {header['role']}")
    _check_model_config(header, cfg, path)
    model = Detector(cfg.encoder, cfg.bev, np.random.default_rng(0))
    model.load_state_dict(params)
    return model


# -- commands ----------------------------------------------------------------

def scenario_seeds(seed: int, n: int):
    return [int(s) for s in component_rng(seed, "simulate").integers(0, 2**31 - 1, n)]


def split_counts(n: int, fractions) -> list:
    """Scenario counts per split; rounding remainders go to the last split."""
    n_train = int(np.floor(fractions[0] * n + 0.5))
    n_val = min(n - n_train, int(np.floor(fractions[1] * n + 0.5)))
    return [n_train, n_val, n - n_train - n_val]


def cmd_simulate(args, cfg: RunConfig):
    out = resolve_out(args.out, cfg)
    if (out / "dataset.json").exists() and not args.force:
        raise ConfigError(f"{out} already holds a dataset (use --force to overwrite)")
    scenarios = []
    for s in scenario_seeds(cfg.seed, cfg.dataset.n_scenarios):
        sc_cfg = ScenarioConfig(**{**asdict(cfg.scenario), "seed": s})
        try:
            scenarios.append(generate_scenario(sc_cfg))
        except PlacementError as e:
            raise ConfigError(f"scenario seed {s}: {e}") from None
    counts = split_counts(len(scenarios), cfg.dataset.splits)
    splits, k = {}, 0
    for name, c in zip(("train", "val", "test"), counts):
        splits[name] = scenarios[k:k + c]
        k += c
    echo = {"run": cfg.to_dict(), "version": __version__}
    totals = write_dataset(out, splits, echo)
    _say(f"wrote {out}: {len(scenarios)} scenarios "
         f"(train {counts[0]}, val {counts[1]}, test {counts[2]}), "
         f"{totals['frames']} frames, {totals['points']} points")


def cmd_pretrain(args, cfg: RunConfig):
    data = _dataset(args.data)
    frames = data.frames("train")
    pcfg = cfg.pretrain_cfg(**({"ego_only": True} if args.ego_only else {}))
    out = resolve_out(args.out, cfg)
    out.parent.mkdir(parents=True, exist_ok=True)
    log = (lambda s, lr, loss: _say(f"step {s} lr {lr:.6g} loss {loss:.6f}")) if args.verbose else None
    res = pretrain(frames, cfg.bev, cfg.encoder, pcfg, jobs=args.jobs, log=log,
                   config_echo=cfg.to_dict())
    res.save(out)
    curve = out.with_suffix(".curve.csv")
    res.write_curve(curve)
    _say(f"pretrained on {len(frames)} frames, {len(res.curve)} steps, "
         f"loss {res.curve[0][2]:.6f} -> {res.curve[-1][2]:.6f}; wrote {out} and {curve}")


def _metrics_files(out_dir: Path, metrics: dict, cfg: RunConfig, hash_inputs, label: str):
    out_dir.mkdir(parents=True, exist_ok=True)
    row = {"experiment": label, "seed": cfg.seed, "model": label, "setting": "clean", "level": ""}
    row.update(flatten_metrics(metrics, cfg.finetune.iou_thresholds))
    write_csv(out_dir / "metrics.csv", [row], cfg.finetune.iou_thresholds)
    summary = summary_header(cfg.to_dict(), content_hash(*hash_inputs))
    summary["metrics"] = metrics
    write_summary(out_dir / "metrics.json", summary)


def _dataset_bytes(data: Dataset):
    return (data.root / "dataset.json").read_bytes()


def cmd_finetune(args, cfg: RunConfig):
    data = _dataset(args.data)
    init_state, hash_inputs = None, [_dataset_bytes(data)]
    overrides = {}
    if args.label_fraction is not None:
        overrides["label_fraction"] = args.label_fraction
    if args.init:
        init_state = load_encoder_state(args.init, cfg)
        overrides["init"] = "from_checkpoint"
        hash_inputs.append(Path(args.init).read_bytes())
    else:
        overrides["init"] = "scratch"
    fcfg = cfg.finetune_cfg(**overrides)
    out = resolve_out(args.out, cfg)
    out.parent.mkdir(parents=True, exist_ok=True)
    res = finetune(data.frames("train"), data.frames(args.split), cfg.bev, cfg.encoder, fcfg,
                   init_state)
    res.config["run"] = cfg.to_dict()
    res.save(out)
    _metrics_files(out.with_suffix(".metrics"), res.metrics, cfg, hash_inputs, "finetune")
    _say(f"finetuned ({fcfg.init}, label fraction {fcfg.label_fraction:g}) "
         f"AP@0.5 {_fmt(res.metrics.get('ap@0.5'))}; wrote {out}")


def _fmt(v):
    return "undefined" if v is None else f"{v:.4f}"


def cmd_eval(args, cfg: RunConfig):
    data = _dataset(args.data)
    model = load_detector(args.checkpoint, cfg)
    metrics = evaluate(model, data.frames(args.split), cfg.encoder, cfg.finetune_cfg())
    out = resolve_out(args.out, cfg)
    _metrics_files(out, metrics, cfg,
                   [_dataset_bytes(data), Path(args.checkpoint).read_bytes()], "eval")
    parts = [f"AP@{t:g} {_fmt(metrics[f'ap@{t:g}'])}" for t in cfg.finetune.iou_thresholds]
    _say(f"{args.split}: " + ", ".join(parts) + f"; wrote {out}")


def cmd_experiment(args, cfg: RunConfig):
    data = _dataset(args.data)
    out = resolve_out(args.out, cfg)
    out.mkdir(parents=True, exist_ok=True)
    exp = cfg.experiment
    hash_inputs = [_dataset_bytes(data)]
    log = (lambda r: _say(f"{r['model']} {r['setting']}={r['level']} seed {r['seed']} "
                          f"AP@0.5 {_fmt(r['ap@0.5'])}"))
    if args.kind == "data-efficiency":
        train = data.frames("train")
        if args.pretrained:
            state = load_encoder_state(args.pretrained, cfg)
            states = {s: state for s in exp.seeds}
            hash_inputs.append(Path(args.pretrained).read_bytes())
        else:
            states = {s: pretrain(train, cfg.bev, cfg.encoder, cfg.pretrain_cfg(seed=s),
                                  jobs=args.jobs).encoder_state for s in exp.seeds}
        rows, summary = data_efficiency_harness(train, data.frames("test"), cfg.bev, cfg.encoder,
                                                cfg.finetune_cfg(), states, exp.fractions,
                                                exp.seeds, log)
    else:
        if not (args.scratch and args.pretrained):
            raise UsageError("robustness needs --scratch and --pretrained finetuned checkpoints")
        models = {"scratch": load_detector(args.scratch, cfg),
                  "pretrained": load_detector(args.pretrained, cfg)}
        hash_inputs += [Path(args.scratch).read_bytes(), Path(args.pretrained).read_bytes()]
        items = [(rec.scenario, rec.times[k]) for rec, k in data.indexed_frames("test")]
        rows, summary = robustness_harness(models, items, cfg.encoder, cfg.finetune_cfg(),
                                           exp.sigma_xy, exp.sigma_yaw, exp.delays, exp.seeds, log)
    write_csv(out / f"{args.kind}.csv", rows, cfg.finetune.iou_thresholds)
    write_summary(out / f"{args.kind}.json",
                  {**summary_header(cfg.to_dict(), content_hash(*hash_inputs)), **summary})
    _say(f"wrote {out / (args.kind + '.csv')} ({len(rows)} rows)")


def cmd_inspect(args, cfg=None):
    path = Path(args.path)
    if path.is_dir():
        data = _dataset(path)
        lines = [f"dataset {path} (format version {data.meta['format_version']})"]
        for split, names in data.splits.items():
            n = sum(len(data.record(name)) for name in names)
            lines.append(f"  {split}: {len(names)} scenarios, {n} frames")
        _say("\n".join(lines))
        return
    params, header = checkpoint.load(path)
    meta = header.get("meta", {})
    n_params = sum(int(np.prod(p.shape)) for p in params.values())
    lines = [f"checkpoint {path}",
             f"  role: {header['role']}",
             f"  format version: {header['format_version']}",
             f"  parameters: {n_params} in {len(params)} tensors",
             f"  steps: {meta.get('steps')}",
             f"  final loss: {meta.get('final_loss')}"]
    if "metrics" in meta:
        lines.append(f"  AP@0.5: {_fmt(meta['metrics'].get('ap@0.5'))}")
    if args.config_echo:
        lines.append(json.dumps(header.get("config", {}), indent=2, sort_keys=True))
    _say("\n".join(lines))


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="v2xpre", description="Cooperative masked point-cloud pretraining lab.")
    p.add_argument("--version", action="version", version=f"v2xpre {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, data=True):
        sp.add_argument("--config", help="TOML run configuration")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. pretrain.epochs=3")
        sp.add_argument("--jobs", type=int, default=1, help="worker threads")
        if data:
            sp.add_argument("--data", required=True, help="dataset directory")

    sp = sub.add_parser("simulate", help="generate a synthetic dataset")
    common(sp, data=False)
    sp.add_argument("--out", required=True)
    sp.add_argument("--force", action="store_true")

    sp = sub.add_parser("pretrain", help="masked reconstruction pretraining")
    common(sp)
    sp.add_argument("--out", required=True, help="checkpoint path")
    sp.add_argument("--ego-only", action="store_true")
    sp.add_argument("--verbose", action="store_true")

    sp = sub.add_parser("finetune", help="train the detector")
    common(sp)
    sp.add_argument("--init", help="pretrained encoder checkpoint (omit for scratch)")
    sp.add_argument("--out", required=True, help="checkpoint path")
    sp.add_argument("--label-fraction", type=float)
    sp.add_argument("--split", default="test", help="evaluation split")

    sp = sub.add_parser("eval", help="evaluate a finetuned checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", required=True, help="metrics directory")
    sp.add_argument("--split", default="test")

    sp = sub.add_parser("experiment", help="data-efficiency or robustness harness")
    sp.add_argument("kind", choices=("data-efficiency", "robustness"))
    common(sp)
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--pretrained", help="encoder (data-efficiency) or finetuned model (robustness)")
    sp.add_argument("--scratch", help="finetuned scratch model (robustness)")

    sp = sub.add_parser("inspect", help="summarize a checkpoint or dataset")
    sp.add_argument("path")
    sp.add_argument("--config-echo", action="store_true")
    return p


COMMANDS = {"simulate": cmd_simulate, "pretrain": cmd_pretrain, "finetune": cmd_finetune,
            "eval": cmd_eval, "experiment": cmd_experiment, "inspect": cmd_inspect}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage().strip())
        if getattr(args, "jobs", 1) < 1:
            raise UsageError("--jobs must be >= 1")
        cfg = None if args.command == "inspect" else _config(args)
        COMMANDS[args.command](args, cfg)
        return EXIT_OK
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (PretrainAbort, NonFiniteError) as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        diag = getattr(e, "diagnostics", None)
        if diag:
            print(json.dumps(diag, sort_keys=True), file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, FormatError, CheckpointError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
