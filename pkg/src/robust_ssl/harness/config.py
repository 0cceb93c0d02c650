"""Experiment configuration: a TOML file with one table per component.

Example::

    output_dir = "runs/faraway"
    run_modes = ["baseline-ssl", "robust-meta"]
    seeds = [0, 1, 2]

    [data]
    ood_kind = "faraway"

    [model]
    hidden = [32, 32]
    norm_mode = "BN"

    [sweep]
    "data.ood_ratio" = [0.5, 0.75]

Every field not given takes its default, and the fully defaulted values are
stored with each report. ``[sweep]`` maps ``section.field`` to a list of
values; cells are the product of all sweep axes, run modes and seeds.
"""
from __future__ import annotations

import dataclasses
import itertools
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from ..bilevel import RUN_MODES, BilevelConfig
from ..data import SyntheticSpec
from ..losses import LossConfig
from ..nn import ModelSpec

OUTPUT_ROOT_ENV = "ROBUST_SSL_OUTPUT_ROOT"
SECTIONS = ("data", "model", "loss", "bilevel")
TOP_LEVEL = {"name", "output_dir", "run_modes", "seeds", "workers", "eval_every",
             "sweep", *SECTIONS}


class ConfigError(ValueError):
    """An invalid configuration; the message names the offending field."""


@dataclass(frozen=True)
class ModelConfig:
    """Hidden widths and normalization; input and output widths come from the data."""

    hidden: tuple[int, ...] = (32, 32)
    norm_mode: str = "NBN"
    activation: str = "tanh"
    momentum: float = 0.1
    epsilon: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(self.hidden))
        self.spec(2, 2)  # raises ModelError (a ValueError) on bad settings

    def spec(self, dim: int, n_classes: int, seed: int = 0) -> ModelSpec:
        return ModelSpec((dim, *self.hidden, n_classes), self.norm_mode, self.activation,
                         seed, self.momentum, self.epsilon)


@dataclass(frozen=True)
class Cell:
    """One training run: a run mode and seed applied to fully resolved settings."""

    run_mode: str
    seed: int
    data: SyntheticSpec
    model: ModelConfig
    loss: LossConfig
    bilevel: BilevelConfig
    eval_every: int
    sweep: tuple[tuple[str, Any], ...] = ()


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    output_dir: Path = Path("runs")
    run_modes: tuple[str, ...] = ("baseline-ssl",)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    workers: int = 0
    eval_every: int = 10
    data: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    loss: dict = field(default_factory=dict)
    bilevel: dict = field(default_factory=dict)
    sweep: dict = field(default_factory=dict)

    def cells(self) -> list[Cell]:
        axes = list(self.sweep.items())
        combos = itertools.product(*[vals for _, vals in axes]) if axes else [()]
        out = []
        for combo in combos:
            chosen = tuple((key, val) for (key, _), val in zip(axes, combo))
            sections = {s: dict(getattr(self, s)) for s in SECTIONS}
            for key, val in chosen:
                sec, name = key.split(".", 1)
                sections[sec][name] = val
            for mode in self.run_modes:
                for seed in self.seeds:
                    data = build(SyntheticSpec, {**sections["data"], "seed": seed}, "data")
                    out.append(Cell(
                        run_mode=mode, seed=seed, data=data,
                        model=build(ModelConfig, sections["model"], "model"),
                        loss=build(LossConfig, sections["loss"], "loss"),
                        bilevel=build(BilevelConfig, sections["bilevel"], "bilevel"),
                        eval_every=self.eval_every, sweep=chosen))
        return out


def _coerce(cls, values: dict) -> dict:
    """Lists become tuples where the dataclass expects tuples (TOML has no tuples)."""
    out = dict(values)
    for f in fields(cls):
        if f.name in out and isinstance(out[f.name], list):
            out[f.name] = tuple(out[f.name])
    return out


def build(cls, values: dict, section: str):
    """Instantiate a settings dataclass, naming the offending field on failure."""
    known = {f.name for f in fields(cls)}
    for key in values:
        if key not in known:
            raise ConfigError(f"{section}.{key}: unknown field (valid: {', '.join(sorted(known))})")
    try:
        return cls(**_coerce(cls, values))
    except (TypeError, ValueError) as e:
        field_name = next((k for k in values if k in str(e)), None)
        where = f"{section}.{field_name}" if field_name else section
        raise ConfigError(f"{where}: {e}") from None


def resolve_output_dir(path: str | Path, base: Path | None = None) -> Path:
    """Output directory, re-rooted under $ROBUST_SSL_OUTPUT_ROOT when it is set."""
    path = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root:
        rel = path if not path.is_absolute() else Path(path.name)
        return Path(root) / rel
    if not path.is_absolute() and base is not None:
        return base / path
    return path


def parse_config(raw: dict, base: Path | None = None) -> ExperimentConfig:
    for key in raw:
        if key not in TOP_LEVEL:
            raise ConfigError(f"{key}: unknown top-level field")
    cfg = ExperimentConfig()
    if "name" in raw:
        cfg.name = str(raw["name"])
    cfg.output_dir = resolve_output_dir(raw.get("output_dir", f"runs/{cfg.name}"), base)
    modes = raw.get("run_modes", list(cfg.run_modes))
    if isinstance(modes, str):
        modes = [modes]
    for m in modes:
        if m not in RUN_MODES:
            raise ConfigError(f"run_modes: {m!r} is not one of {RUN_MODES}")
    cfg.run_modes = tuple(modes)
    seeds = raw.get("seeds", list(cfg.seeds))
    if isinstance(seeds, int):
        seeds = list(range(seeds))
    if not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
        raise ConfigError("seeds: expected a nonempty list of nonnegative integers (or a count)")
    cfg.seeds = tuple(seeds)
    for key in ("workers", "eval_every"):
        if key in raw:
            val = raw[key]
            if not isinstance(val, int) or val < (0 if key == "workers" else 1):
                raise ConfigError(f"{key}: invalid value {val!r}")
            setattr(cfg, key, val)
    for sec in SECTIONS:
        val = raw.get(sec, {})
        if not isinstance(val, dict):
            raise ConfigError(f"{sec}: expected a table")
        setattr(cfg, sec, dict(val))
    sweep = raw.get("sweep", {})
    if not isinstance(sweep, dict):
        raise ConfigError("sweep: expected a table of 'section.field' = [values]")
    for key, vals in sweep.items():
        sec = key.split(".", 1)[0]
        if sec not in SECTIONS or "." not in key:
            raise ConfigError(f"sweep.{key}: keys must look like 'data.ood_ratio'")
        if not isinstance(vals, list) or not vals:
            raise ConfigError(f"sweep.{key}: expected a nonempty list of values")
    cfg.sweep = dict(sweep)
    # validate every combination now so errors surface before any training
    for axis_combo in itertools.product(*cfg.sweep.values()) if cfg.sweep else [()]:
        sections = {s: dict(getattr(cfg, s)) for s in SECTIONS}
        for key, val in zip(cfg.sweep, axis_combo):
            sec, name = key.split(".", 1)
            sections[sec][name] = val
        build(SyntheticSpec, sections["data"], "data")
        build(ModelConfig, sections["model"], "model")
        build(LossConfig, sections["loss"], "loss")
        build(BilevelConfig, sections["bilevel"], "bilevel")
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from None
    return parse_config(raw, base=None)


def load_data_spec(path: str | Path) -> SyntheticSpec:
    """A SyntheticSpec from a TOML file, either bare fields or a ``[data]`` table."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"spec file not found: {path}")
    try:
        raw = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from None
    return build(SyntheticSpec, raw.get("data", raw), "data")


def to_plain(obj) -> Any:
    """Dataclasses and tuples as JSON-friendly dicts and lists."""
    if dataclasses.is_dataclass(obj):
        return {f.name: to_plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [to_plain(v) for v in obj]
    if isinstance(obj, Path):
        return str(obj)
    return obj


__all__ = ["ConfigError", "ExperimentConfig", "ModelConfig", "Cell", "OUTPUT_ROOT_ENV",
           "load_config", "parse_config", "load_data_spec", "resolve_output_dir", "build",
           "to_plain"]
