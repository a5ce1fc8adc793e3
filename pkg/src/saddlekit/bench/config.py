"""Experiment configuration: strict ``key = value`` files with ``[section]`` headers.

Keys before the first header belong to ``[run]``. Sections and keys are
checked against the known parameter sets and anything unknown is an error.
"""

from __future__ import annotations

import configparser
import dataclasses
import math
import typing
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

from ..dimer import DimerParams
from ..errors import ConfigError
from ..neb import VARIANTS, NebParams
from ..potentials.fields import CoreField3D, TubeField2D

__all__ = ["EXPERIMENTS", "ExperimentConfig", "load_config", "parse_config", "DEFAULTS"]

EXPERIMENTS = ("neb2d", "sweep2d", "dimer2d", "wvac", "rate2d", "projdemo")

# experiment -> (seeds, iterations, variants)
DEFAULTS = {
    "neb2d": (200, 500, VARIANTS),
    "sweep2d": (16, 500, ("std", "diag", "ua")),
    "dimer2d": (200, 260, ("std", "ua")),
    "wvac": (24, 340, ("std", "diag", "ua")),
    "rate2d": (80, 60, VARIANTS),
    "projdemo": (1, 20000, ("euclidean", "g_orthogonal", "oblique")),
}

_RUN_KEYS = {
    "experiment": str,
    "seeds": int,
    "iterations": int,
    "variants": tuple,
    "seed_offset": int,
    "threads": int,
    "out": str,
    "setfl": str,
    "success_tol": float,
    "noise_multiplier": float,
    "reference_iterations": int,
    "n_cells": int,
    "a0": float,
    "sweep_thetas": "floats",
    "sweep_amps": "floats",
    "euler_step": float,
}


def _field_types(cls, skip=()):
    hints = typing.get_type_hints(cls)
    out = {}
    for f in dataclasses.fields(cls):
        if f.name.startswith("_") or f.name in skip:
            continue
        out[f.name] = hints[f.name]
    return out


_NEB_KEYS = _field_types(NebParams, skip=("variant",))
_DIMER_KEYS = _field_types(DimerParams, skip=("variant",))
_FIELD_KEYS = {**_field_types(TubeField2D, skip=("dim", "a")),
               **_field_types(CoreField3D, skip=("core_center", "hop_axis", "hop_length", "cell", "migrating", "hop_start"))}


@dataclass
class ExperimentConfig:
    """Resolved settings for one experiment; per-experiment defaults fill unset fields."""

    experiment: str
    seeds: Optional[int] = None
    iterations: Optional[int] = None
    variants: Optional[Tuple[str, ...]] = None
    seed_offset: int = 0
    threads: Optional[int] = None
    out: str = "."
    setfl: Optional[str] = None
    success_tol: Optional[float] = None
    noise_multiplier: Optional[float] = None
    reference_iterations: int = 320
    n_cells: int = 4
    a0: Optional[float] = None
    sweep_thetas: Tuple[float, ...] = tuple(k * math.pi / 12 for k in range(7))
    sweep_amps: Tuple[float, ...] = (0.05, 0.10, 0.18, 0.26, 0.36)
    euler_step: float = 1e-3
    neb: Dict[str, object] = field(default_factory=dict)
    dimer: Dict[str, object] = field(default_factory=dict)
    field: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; expected one of {EXPERIMENTS}")
        seeds, iters, variants = DEFAULTS[self.experiment]
        if self.seeds is None:
            self.seeds = seeds
        if self.iterations is None:
            self.iterations = iters
        if self.variants is None:
            self.variants = variants
        self.validate()

    def validate(self):
        if self.seeds < 1:
            raise ConfigError("seeds must be at least 1")
        if self.iterations < 0:
            raise ConfigError("iterations must be non-negative")
        if self.seed_offset < 0:
            raise ConfigError("seed_offset must be non-negative")
        if self.threads is not None and self.threads < 1:
            raise ConfigError("threads must be at least 1")
        allowed = DEFAULTS[self.experiment][2]
        if self.experiment in ("neb2d", "rate2d", "sweep2d", "wvac"):
            allowed = VARIANTS
        bad = [v for v in self.variants if v not in allowed]
        if bad or not self.variants:
            raise ConfigError(f"variants {bad or '[]'} not valid for {self.experiment}; choose from {allowed}")
        if len(set(self.variants)) != len(self.variants):
            raise ConfigError("variants must not repeat")
        for name, table in (("neb", _NEB_KEYS), ("dimer", _DIMER_KEYS), ("field", _FIELD_KEYS)):
            unknown = sorted(set(getattr(self, name)) - set(table))
            if unknown:
                raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(unknown)}")

    @property
    def seed_list(self):
        return list(range(self.seed_offset, self.seed_offset + self.seeds))

    def echo(self) -> Dict[str, object]:
        """Plain-data view with sorted keys for reports."""
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, dict):
                v = {k: v[k] for k in sorted(v)}
            elif isinstance(v, tuple):
                v = list(v)
            out[f.name] = v
        return out


def _convert(raw: str, typ, where: str):
    text = raw.strip()
    origin = typing.get_origin(typ)
    if origin is typing.Union:
        args = [a for a in typing.get_args(typ) if a is not type(None)]
        if text.lower() == "none":
            return None
        typ = args[0]
    try:
        if typ is bool:
            low = text.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(text)
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
        if typ is str:
            return text
        if typ is tuple:
            return tuple(p.strip() for p in text.split(",") if p.strip())
        if typ == "floats":
            return tuple(float(p) for p in text.split(",") if p.strip())
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {getattr(typ, '__name__', typ)}") from None
    raise ConfigError(f"{where}: unsupported type {typ}")


def parse_config(text: str, source: str = "<config>") -> Dict[str, object]:
    """Parse config text into keyword arguments for :class:`ExperimentConfig`."""
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"),
                                       inline_comment_prefixes=("#",), strict=True, empty_lines_in_values=False)
    parser.optionxform = str
    try:
        # headerless leading keys go to [run]; an explicit leading [run] is kept as is
        first = next((ln.strip() for ln in text.splitlines() if ln.strip() and ln.strip()[0] not in "#;"), "")
        parser.read_string(text if first.startswith("[") else "[run]\n" + text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    kwargs: Dict[str, object] = {"neb": {}, "dimer": {}, "field": {}}
    tables = {"neb": _NEB_KEYS, "dimer": _DIMER_KEYS, "field": _FIELD_KEYS}
    for section in parser.sections():
        items = parser.items(section)
        if section == "run":
            for key, value in items:
                if key not in _RUN_KEYS:
                    raise ConfigError(f"{source}: unknown key {key!r} in [run]")
                kwargs[key] = _convert(value, _RUN_KEYS[key], f"{source} [run] {key}")
        elif section in tables:
            for key, value in items:
                if key not in tables[section]:
                    raise ConfigError(f"{source}: unknown key {key!r} in [{section}]")
                kwargs[section][key] = _convert(value, tables[section][key], f"{source} [{section}] {key}")
        else:
            raise ConfigError(f"{source}: unknown section [{section}]")
    return kwargs


def load_config(path: Optional[str], overrides: Optional[Dict[str, object]] = None) -> ExperimentConfig:
    """Read ``path`` (if any), apply ``overrides`` (CLI flags win) and validate."""
    kwargs: Dict[str, object] = {"neb": {}, "dimer": {}, "field": {}}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        kwargs = parse_config(text, path)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key == "experiment" and "experiment" in kwargs and kwargs["experiment"] != value:
            raise ConfigError(f"config names experiment {kwargs['experiment']!r} but {value!r} was requested")
        kwargs[key] = value
    if "experiment" not in kwargs:
        raise ConfigError("no experiment given")
    return ExperimentConfig(**kwargs)
