"""YAML experiment configuration.

A config has four top-level sections plus a few scalars::

    source:   DomainSpec fields for the labelled domain
    target:   DomainSpec fields for the unlabelled domain
    train:    TrainConfig fields
    output_dir, eval_every, counterparts, test_fraction

Every key is optional; missing keys take the defaults shown by
``memuda config dump``. Unknown keys are rejected with their line number.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .data import DomainSpec
from .numerics import InvalidParameterError
from .trainer import TrainConfig


class ConfigError(InvalidParameterError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


def default_source() -> DomainSpec:
    return DomainSpec(num_identities=50, samples_per_identity=12, num_cameras=4, seed=1)


def default_target() -> DomainSpec:
    return DomainSpec(num_identities=40, samples_per_identity=12, num_cameras=5, seed=2, label_offset=1000)


@dataclass
class ExperimentConfig:
    source: DomainSpec = field(default_factory=default_source)
    target: DomainSpec = field(default_factory=default_target)
    train: TrainConfig = field(default_factory=TrainConfig)
    output_dir: str = "runs/default"
    eval_every: int = 1
    counterparts: int | None = None
    test_fraction: float = 0.3

    @property
    def num_counterparts(self) -> int:
        c = self.target.num_cameras - 1
        return c if self.counterparts is None else self.counterparts

    def validate(self) -> None:
        self.source.validate()
        self.target.validate()
        self.train.validate()
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError("test_fraction must lie in (0, 1)")
        if self.train.ci and self.train.mode == "adapt":
            if self.target.num_cameras < 2:
                raise ConfigError("CI requires C ≥ 2")
            if self.num_counterparts < 1:
                raise ConfigError("CI requires at least one counterpart per sample")
        if not 0 <= self.num_counterparts <= self.target.num_cameras - 1:
            raise ConfigError(f"counterparts must lie in [0, {self.target.num_cameras - 1}]")
        src_hi = self.source.label_offset + self.source.num_identities
        tgt_hi = self.target.label_offset + self.target.num_identities
        if self.source.label_offset < tgt_hi and self.target.label_offset < src_hi:
            raise ConfigError("source and target identity label ranges overlap; adjust label_offset")

    def to_dict(self) -> dict:
        return {
            "source": dataclasses.asdict(self.source),
            "target": dataclasses.asdict(self.target),
            "train": dataclasses.asdict(self.train),
            "output_dir": self.output_dir,
            "eval_every": self.eval_every,
            "counterparts": self.counterparts,
            "test_fraction": self.test_fraction,
        }

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, allow_unicode=True)


_SECTIONS = {"source": DomainSpec, "target": DomainSpec, "train": TrainConfig}
_SCALARS = {"output_dir": str, "eval_every": int, "counterparts": (int, type(None)), "test_fraction": float}


def _key_lines(node, prefix=()) -> dict:
    """Map key paths to 1-based line numbers using the composed YAML tree."""
    out = {}
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            path = prefix + (k.value,)
            out[path] = k.start_mark.line + 1
            out.update(_key_lines(v, path))
    return out


def _coerce(value, want, where, line):
    if want is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if isinstance(want, tuple):
        ok = isinstance(value, want) and not isinstance(value, bool)
    else:
        ok = isinstance(value, want) and not (isinstance(value, bool) and want is not bool)
    if not ok:
        raise ConfigError(f"{where}: expected {getattr(want, '__name__', want)}, got {value!r}", line)
    return value


def _field_types(cls) -> dict:
    hints = {}
    for f in dataclasses.fields(cls):
        default = f.default if f.default is not dataclasses.MISSING else None
        t = str(f.type)
        if t.startswith("int") and "None" in t:
            hints[f.name] = (int, type(None))
        elif t.startswith("int"):
            hints[f.name] = int
        elif t.startswith("float"):
            hints[f.name] = float
        elif t.startswith("bool"):
            hints[f.name] = bool
        elif t.startswith("str"):
            hints[f.name] = str
        else:
            hints[f.name] = type(default)
    return hints


def parse_config(text: str, source_name: str = "<config>") -> ExperimentConfig:
    try:
        raw = yaml.safe_load(text)
        tree = yaml.compose(text)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark or exc.context_mark
        line = mark.line + 1 if mark is not None else None
        raise ConfigError(f"{source_name}: {exc.problem or exc}", line) from None
    lines = _key_lines(tree) if tree is not None else {}
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{source_name}: top level must be a mapping", 1)

    cfg = ExperimentConfig()
    kwargs = {}
    for key, value in raw.items():
        line = lines.get((key,))
        if key in _SECTIONS:
            cls = _SECTIONS[key]
            if value is None:
                value = {}
            if not isinstance(value, dict):
                raise ConfigError(f"section {key!r} must be a mapping", line)
            types = _field_types(cls)
            changes = {}
            for k, v in value.items():
                kline = lines.get((key, k))
                if k not in types:
                    raise ConfigError(f"unknown key {key}.{k}", kline)
                changes[k] = _coerce(v, types[k], f"{key}.{k}", kline)
            kwargs[key] = dataclasses.replace(getattr(cfg, key), **changes)
        elif key in _SCALARS:
            kwargs[key] = _coerce(value, _SCALARS[key], key, line)
        else:
            raise ConfigError(f"unknown key {key!r}", line)
    cfg = dataclasses.replace(cfg, **kwargs)
    try:
        cfg.validate()
    except ConfigError:
        raise
    except InvalidParameterError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    return parse_config(path.read_text(encoding="utf-8"), str(path))
