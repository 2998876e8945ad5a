"""Run configuration: an INI-style file with one section per pipeline stage.

::

    [sim]
    n_sequences = 500
    gamma_a = 0.7

    [grid]
    archs = linear, mlp, attention
    pls = 12, 24, 36, 48

Any key can also be overridden with ``section.key=value`` on the command line.
Unknown sections and keys are rejected.
"""
from __future__ import annotations

import configparser
import dataclasses
import typing
from dataclasses import dataclass, field

from .errors import ConfigError
from .evaluation import GridSpec
from .factor_model import FactorModelConfig
from .forecaster import ForecasterConfig
from .simgen import SimConfig


@dataclass
class IngestConfig:
    gap_threshold_s: int = 900
    min_trip_len: int = 10
    resample_interval_s: int = 60
    seq_len: int = 60

    def validate(self) -> "IngestConfig":
        for f in dataclasses.fields(self):
            if getattr(self, f.name) < 1:
                raise ConfigError(f"ingest.{f.name} must be >= 1, got {getattr(self, f.name)!r}")
        return self


@dataclass
class PathsConfig:
    dataset: str | None = None
    input: str | None = None
    factor_checkpoint: str | None = None
    forecaster_checkpoint: str | None = None
    out: str | None = None


@dataclass
class RunOptions:
    parallel: int = 1


@dataclass
class RunConfig:
    sim: SimConfig = field(default_factory=SimConfig)
    factor: FactorModelConfig = field(default_factory=FactorModelConfig)
    forecaster: ForecasterConfig = field(default_factory=ForecasterConfig)
    grid: GridSpec = field(default_factory=GridSpec)
    ingest: IngestConfig = field(default_factory=IngestConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    run: RunOptions = field(default_factory=RunOptions)

    def validate(self) -> "RunConfig":
        self.sim.validate()
        self.factor.validate()
        self.forecaster.validate()
        self.grid.validate()
        self.ingest.validate()
        if self.run.parallel < 1:
            raise ConfigError(f"run.parallel must be >= 1, got {self.run.parallel}")
        return self


def _convert(section: str, key: str, raw: str, tp):
    name = f"{section}.{key}"
    raw = raw.strip()
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union or (origin is not None and type(None) in args):
        if raw.lower() in ("", "none"):
            return None
        tp = next(a for a in args if a is not type(None))
        origin, args = typing.get_origin(tp), typing.get_args(tp)
    if origin is list:
        return [_convert(section, key, part, args[0]) for part in raw.split(",") if part.strip()]
    try:
        if tp is bool:
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {getattr(tp, '__name__', tp)}") from None


def _set(cfg: RunConfig, section: str, key: str, raw: str) -> None:
    if section not in {f.name for f in dataclasses.fields(RunConfig)}:
        raise ConfigError(f"unknown config section [{section}]")
    target = getattr(cfg, section)
    hints = typing.get_type_hints(type(target))
    if key not in hints:
        raise ConfigError(f"unknown config key {section}.{key}")
    setattr(target, key, _convert(section, key, raw, hints[key]))


def parse_config(text: str, overrides: list[str] | None = None, source: str = "<config>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    cfg = RunConfig()
    for section in parser.sections():
        for key, raw in parser.items(section):
            _set(cfg, section, key, raw)
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        lhs, raw = item.split("=", 1)
        section, key = lhs.strip().split(".", 1)
        _set(cfg, section, key, raw)
    return cfg.validate()


def load_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    if path is None:
        return parse_config("", overrides)
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, overrides, source=str(path))


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        lines.append(f"[{f.name}]")
        for key, value in dataclasses.asdict(getattr(cfg, f.name)).items():
            if value is None:
                continue
            if isinstance(value, list):
                value = ", ".join(map(str, value))
            elif isinstance(value, bool):
                value = str(value).lower()
            lines.append(f"{key} = {value}")
        lines.append("")
    return "\n".join(lines)
