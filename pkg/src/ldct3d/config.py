"""Experiment configuration: TOML files mapped onto the module dataclasses.

A config file has the sections ``phantom``, ``dataset``, ``geometry``,
``noise``, ``filter``, ``model``, ``train``, ``stitch``, ``metrics`` and
``paths``; every key is optional and falls back to the dataclass default.
Unknown sections or keys are errors. ``LDCT3D_DATA_ROOT`` overrides
``paths.data_root``.
"""

from __future__ import annotations

import dataclasses
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

from .fbp import FilterSpec
from .model import ModelSpec
from .phantom import PhantomConfig
from .projector import NoiseSpec
from .trainer import TrainConfig
from .volume import ProjectionGeometry

DATA_ROOT_ENV = "LDCT3D_DATA_ROOT"
PRESET_DIR = Path(__file__).with_name("presets")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetConfig:
    n_train: int = 192
    n_val: int = 8
    n_test: int = 20
    seed: int = 0


@dataclass(frozen=True)
class StitchConfig:
    """Blockwise inference; empty block means whole-volume forward."""

    block: tuple = ()
    margin: tuple = ()

    def __post_init__(self):
        if len(self.block) != len(self.margin):
            raise ValueError("stitch.block and stitch.margin need the same length")


@dataclass(frozen=True)
class MetricsConfig:
    # a positive number, "volume" (ground-truth maximum) or "slice"
    data_range: float | str = 1.0
    constants: str = "standard"

    def __post_init__(self):
        dr = self.data_range
        if isinstance(dr, str):
            if dr not in ("slice", "volume"):
                raise ValueError(f"data_range must be a number, 'slice' or 'volume', got {dr!r}")
        elif not dr > 0:
            raise ValueError("data_range must be positive")
        if self.constants not in ("standard", "paper"):
            raise ValueError(f"unknown SSIM constants {self.constants!r}")


@dataclass(frozen=True)
class PathsConfig:
    data_root: str = "data"
    phantoms: str = "phantoms"
    pairs: str = "pairs"
    runs: str = "runs"
    reports: str = "reports"


@dataclass(frozen=True)
class ExperimentConfig:
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    geometry: ProjectionGeometry = field(default_factory=lambda: ProjectionGeometry(60, 182))
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    filter: FilterSpec = field(default_factory=FilterSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    stitch: StitchConfig = field(default_factory=StitchConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def root(self) -> Path:
        return Path(self.paths.data_root)

    def path(self, key: str) -> Path:
        return self.root() / getattr(self.paths, key)

    def to_dict(self) -> dict:
        return {f.name: _plain(dataclasses.asdict(getattr(self, f.name))) for f in dataclasses.fields(self)}

    def replace(self, section: str, **changes) -> "ExperimentConfig":
        try:
            new = dataclasses.replace(getattr(self, section), **changes)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{section}] {exc}") from exc
        return dataclasses.replace(self, **{section: new})


SECTIONS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def _plain(obj):
    """JSON-friendly copy: tuples to lists, +inf to the string 'inf'."""
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, float) and math.isinf(obj):
        return "inf" if obj > 0 else "-inf"
    return obj


def _coerce(value, default):
    if isinstance(default, tuple) or (isinstance(value, list) and default is None):
        return tuple(_coerce(v, None) for v in value)
    if isinstance(default, float) and not isinstance(value, bool):
        if isinstance(value, int):
            return float(value)
        if isinstance(value, str):
            if value.lower() in ("none", "off"):  # noise-free: snr_db = "none"
                return math.inf
            try:
                return float(value)
            except ValueError:
                return value  # symbolic values such as data_range = "slice"
    return value


# alternative spellings accepted in config files -> field names
ALIASES = {
    "filter": {"filter": "kind", "freq_scale": "frequency_scaling"},
    "metrics": {"ssim_constants": "constants"},
}


def _section(name: str, table: dict):
    base = SECTIONS[name].default_factory()
    table = dict(table)
    for alias, field_name in ALIASES.get(name, {}).items():
        if alias in table:
            if field_name in table:
                raise ConfigError(f"[{name}] both {alias!r} and {field_name!r} given")
            table[field_name] = table.pop(alias)
    known = {f.name for f in dataclasses.fields(base)}
    unknown = sorted(set(table) - known)
    if unknown:
        raise ConfigError(f"[{name}] unknown key(s): {', '.join(unknown)}")
    kwargs = {k: _coerce(v, getattr(base, k)) for k, v in table.items()}
    try:
        return dataclasses.replace(base, **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}] {exc}") from exc


def from_dict(d: dict) -> ExperimentConfig:
    unknown = sorted(set(d) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    parts = {}
    for name, table in d.items():
        if not isinstance(table, dict):
            raise ConfigError(f"section {name!r} must be a table")
        parts[name] = _section(name, table)
    return ExperimentConfig(**parts)


def load_config(path) -> ExperimentConfig:
    """Read a config file; a bare preset name (e.g. ``paper-synthetic``) is looked up in the shipped presets."""
    p = Path(path)
    if not p.exists() and (PRESET_DIR / f"{p.name}.cfg").exists():
        p = PRESET_DIR / f"{p.name}.cfg"
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{p}: {exc}") from exc
    cfg = from_dict(raw)
    env_root = os.environ.get(DATA_ROOT_ENV)
    if env_root:  # the environment overrides the file; --data-root overrides both
        cfg = cfg.replace("paths", data_root=env_root)
    return cfg


def preset_names() -> list[str]:
    return sorted(p.stem for p in PRESET_DIR.glob("*.cfg"))
