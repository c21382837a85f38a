"""INI-style experiment configuration.

Sections mirror the dataclasses they populate::

    [data]      SynthSpec fields, plus optional ``path`` / ``eval_path``
    [train]     TrainConfig fields
    [eval]      k_values, anchor
    [sweep]     lambdas, batches, sweep_base_batch, seeds

Unknown sections or keys are errors so that a typo never silently falls
back to a default.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields, replace

from slap.data import SynthSpec
from slap.errors import ConfigError, SpecError
from slap.trainer import TrainConfig


@dataclass
class EvalSettings:
    k_values: tuple = (1, 5, 10)
    anchor: str = "auto"


@dataclass
class SweepSettings:
    lambdas: tuple = (0.0, 0.25, 0.5, 0.75, 1.0)
    batches: tuple = (16, 32, 64, 128)
    sweep_base_batch: int = 16
    seeds: tuple = (0, 1, 2)


@dataclass
class DataSource:
    path: str = ""
    eval_path: str = ""


@dataclass
class ExperimentConfig:
    data: SynthSpec = field(default_factory=SynthSpec)
    source: DataSource = field(default_factory=DataSource)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSettings = field(default_factory=EvalSettings)
    sweep: SweepSettings = field(default_factory=SweepSettings)

    def with_seed(self, seed):
        return replace(self, data=replace(self.data, seed=seed), train=replace(self.train, seed=seed))

    def snapshot(self):
        def plain(obj):
            d = dataclasses.asdict(obj)
            return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

        return {
            "data": {**plain(self.data), **plain(self.source)},
            "train": plain(self.train),
            "eval": plain(self.eval),
            "sweep": plain(self.sweep),
        }


def _convert(section, key, raw, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            kind = type(default[0]) if default else int
            return tuple(kind(v.strip()) for v in raw.split(",") if v.strip())
        return raw
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: {exc}") from None


def _apply(section, obj, items):
    known = {f.name: f for f in fields(obj)}
    updates = {}
    for key, raw in items:
        if key not in known:
            raise ConfigError(f"[{section}] unknown key {key!r}")
        updates[key] = _convert(section, key, raw, getattr(obj, key))
    return replace(obj, **updates)


def parse_config(text, source="<config>"):
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    cfg = ExperimentConfig()
    for section in parser.sections():
        items = list(parser.items(section))
        if section == "data":
            src_keys = {f.name for f in fields(DataSource)}
            cfg.source = _apply("data", cfg.source, [(k, v) for k, v in items if k in src_keys])
            cfg.data = _apply("data", cfg.data, [(k, v) for k, v in items if k not in src_keys])
        elif section == "train":
            cfg.train = _apply("train", cfg.train, items)
        elif section == "eval":
            cfg.eval = _apply("eval", cfg.eval, items)
        elif section == "sweep":
            cfg.sweep = _apply("sweep", cfg.sweep, items)
        else:
            raise ConfigError(f"unknown section [{section}]")
    if cfg.eval.anchor not in ("auto", "z", "q"):
        raise ConfigError(f"[eval] anchor: expected auto, z or q, got {cfg.eval.anchor!r}")
    cfg.train.validate()
    try:
        cfg.data.validate()
    except SpecError as exc:
        raise ConfigError(f"[data] {exc}") from None
    return cfg


def load_config(path):
    with open(path) as fh:
        return parse_config(fh.read(), source=str(path))


def render_config(cfg):
    """Inverse of :func:`parse_config` (round-trips every field)."""
    snap = cfg.snapshot()
    out = []
    for section in ("data", "train", "eval", "sweep"):
        out.append(f"[{section}]")
        for key, value in snap[section].items():
            if isinstance(value, list):
                value = ", ".join(str(v) for v in value)
            out.append(f"{key} = {value}")
        out.append("")
    return "\n".join(out)
