"""Run configuration: one flat TOML file, strictly validated, with dotted overrides."""
from __future__ import annotations

import dataclasses
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from v2xpre.bevgrid import BevSpec
from v2xpre.coopre.model import EncoderConfig
from v2xpre.coopre.pretrain import PretrainConfig
from v2xpre.eval.finetune import FinetuneConfig
from v2xpre.simulator.scene import ScenarioConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetConfig:
    n_scenarios: int = 20
    splits: tuple = (0.7, 0.1, 0.2)

    def __post_init__(self):
        if self.n_scenarios < 1:
            raise ValueError("n_scenarios must be >= 1")
        s = tuple(float(x) for x in self.splits)
        if len(s) != 3 or min(s) < 0 or abs(sum(s) - 1.0) > 1e-9:
            raise ValueError("splits must be three non-negative fractions summing to 1")
        object.__setattr__(self, "splits", s)


@dataclass(frozen=True)
class ExperimentConfig:
    seeds: tuple = (0, 1, 2)
    fractions: tuple = (0.2, 0.5, 0.8, 1.0)
    sigma_xy: tuple = (0.0, 0.2, 0.5)
    sigma_yaw: tuple = (0.0,)
    delays: tuple = (0.0, 0.1, 0.2)

    def __post_init__(self):
        for name in ("seeds", "fractions", "sigma_xy", "sigma_yaw", "delays"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        if any(not 0 < f <= 1 for f in self.fractions):
            raise ValueError("fractions must lie in (0, 1]")
        if any(v < 0 for v in self.sigma_xy + self.sigma_yaw + self.delays):
            raise ValueError("perturbation levels must be >= 0")


SECTIONS = {
    "scenario": ScenarioConfig,
    "dataset": DatasetConfig,
    "bev": BevSpec,
    "encoder": EncoderConfig,
    "pretrain": PretrainConfig,
    "finetune": FinetuneConfig,
    "experiment": ExperimentConfig,
}
# the root seed drives every stage; per-section seeds are derived, not configured
DERIVED = {"scenario": {"seed"}, "pretrain": {"seed"}, "finetune": {"seed"}}
TOP_LEVEL = {"seed": int, "output_root": str}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    output_root: str = ""
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    bev: BevSpec = field(default_factory=BevSpec)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)

    def to_dict(self) -> dict:
        out = {"seed": self.seed, "output_root": self.output_root}
        for name in SECTIONS:
            d = asdict(getattr(self, name))
            for k in DERIVED.get(name, ()):
                d.pop(k, None)
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
        return out

    def pretrain_cfg(self, **kw) -> PretrainConfig:
        return dataclasses.replace(self.pretrain, seed=self.seed, **kw)

    def finetune_cfg(self, **kw) -> FinetuneConfig:
        return dataclasses.replace(self.finetune, **{"seed": self.seed, **kw})


def _check_value(section: str, key: str, default, value):
    where = f"{section}.{key}" if section else key
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, tuple):
        ok = isinstance(value, list) and all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in value)
        value = tuple(value) if ok else value
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{where}: expected {type(default).__name__}, got {value!r}")
    return value


def from_dict(raw: dict) -> RunConfig:
    """Build a RunConfig, rejecting unknown keys and mistyped values."""
    raw = dict(raw)
    top = {}
    for key, typ in TOP_LEVEL.items():
        if key in raw:
            top[key] = _check_value("", key, typ(), raw.pop(key))
    sections = {}
    for name, cls in SECTIONS.items():
        body = raw.pop(name, {})
        if not isinstance(body, dict):
            raise ConfigError(f"[{name}] must be a table")
        defaults = {f.name: (f.default if f.default is not dataclasses.MISSING else f.default_factory())
                    for f in fields(cls)}
        allowed = set(defaults) - DERIVED.get(name, set())
        unknown = set(body) - allowed
        if unknown:
            raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(sorted(unknown))}")
        kwargs = {k: _check_value(name, k, defaults[k], v) for k, v in body.items()}
        if name == "scenario":
            kwargs["seed"] = top.get("seed", 0)
        try:
            sections[name] = cls(**kwargs)
        except (ValueError, TypeError) as e:
            raise ConfigError(f"[{name}]: {e}") from None
    if raw:
        raise ConfigError(f"unknown top-level key(s): {', '.join(sorted(raw))}")
    return RunConfig(**top, **sections)


def parse_override(text: str) -> tuple:
    """``section.key=value`` (TOML value syntax; bare words are strings)."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, value = text.split("=", 1)
    key = key.strip()
    try:
        parsed = tomllib.loads(f"v = {value.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        parsed = value.strip()
    return key.split("."), parsed


def apply_overrides(raw: dict, overrides) -> dict:
    raw = {k: dict(v) if isinstance(v, dict) else v for k, v in raw.items()}
    for text in overrides or ():
        path, value = parse_override(text)
        if len(path) == 1:
            raw[path[0]] = value
        elif len(path) == 2:
            raw.setdefault(path[0], {})
            if not isinstance(raw[path[0]], dict):
                raise ConfigError(f"{path[0]} is not a table")
            raw[path[0]][path[1]] = value
        else:
            raise ConfigError(f"override key {'.'.join(path)!r} is nested too deeply")
    return raw


def load_config(path=None, overrides=()) -> RunConfig:
    raw = {}
    if path is not None:
        try:
            raw = tomllib.loads(Path(path).read_text())
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}") from None
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    return from_dict(apply_overrides(raw, overrides))
