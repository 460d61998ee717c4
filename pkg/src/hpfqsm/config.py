"""TOML experiment configuration with strict key checking."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .finetune import FinetuneConfig
from .training import TrainConfig
from .volume import VoxelGrid


class ConfigError(ValueError):
    pass


def parse_fraction(v) -> float:
    """Accept numbers or strings such as ``"3/8"``."""
    if isinstance(v, str):
        try:
            return float(Fraction(v.strip()))
        except (ValueError, ZeroDivisionError) as e:
            raise ConfigError(f"not a number or fraction: {v!r}") from e
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"not a number: {v!r}")
    return float(v)


@dataclass
class DatasetSection:
    matrix: tuple[int, int, int] = (64, 64, 16)  # (nx, ny, nz)
    voxel_size: tuple[float, float, float] = (0.75, 0.75, 3.0)
    n_train: int = 6
    n_val: int = 2
    n_test: int = 4
    seed: int = 0
    fc: float = 0.5
    b0: float = 3.0
    te: float = 0.0227

    @property
    def grid(self) -> VoxelGrid:
        return VoxelGrid(*self.matrix, *self.voxel_size)


@dataclass
class NetworkSection:
    widths: tuple[int, ...] = (8, 16, 32)
    stages: int = 2
    seed: int = 0

    @property
    def levels(self) -> int:
        return len(self.widths)


@dataclass
class SweepSection:
    fc: tuple[float, ...] = (0.25, 0.375, 0.5, 0.625, 0.75)
    matrix: tuple[int, ...] = (80, 52)  # in-plane target matrices
    no_gain_fc: tuple[float, ...] = (0.25,)


@dataclass
class ExperimentConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    network: NetworkSection = field(default_factory=NetworkSection)
    training: TrainConfig = field(default_factory=TrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    sweep: SweepSection = field(default_factory=SweepSection)
    output: str = "runs/default"

    def __post_init__(self):
        for fc in (*self.sweep.fc, self.dataset.fc, self.finetune.fc):
            if not 0 < fc <= 1:
                raise ConfigError(f"fc {fc} outside (0, 1]")
        g = self.dataset.grid
        for n in self.sweep.matrix:
            if int(n) != n or n < 4:
                raise ConfigError(f"sweep matrix {n} must be an integer >= 4")
            factor = 2 ** (self.network.levels - 1)
            if n % factor:
                raise ConfigError(f"sweep matrix {n} not divisible by {factor}")
        try:
            self.training.check_network(self.network.levels)
        except ValueError as e:
            raise ConfigError(str(e)) from e
        factor = 2 ** (self.network.levels - 1)
        if any(n % factor for n in g.shape):
            raise ConfigError(f"dataset matrix {self.dataset.matrix} not divisible by {factor}")
        if self.network.stages < 1:
            raise ConfigError("network.stages must be >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        """Short stable digest of the full resolved configuration."""
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


_SECTIONS = {
    "dataset": DatasetSection,
    "network": NetworkSection,
    "training": TrainConfig,
    "finetune": FinetuneConfig,
    "sweep": SweepSection,
}
_FC_KEYS = {("dataset", "fc"), ("finetune", "fc"), ("sweep", "fc"), ("sweep", "no_gain_fc")}


def _coerce(section: str, key: str, value, default):
    if (section, key) in _FC_KEYS:
        if isinstance(default, tuple):
            if not isinstance(value, list):
                raise ConfigError(f"{section}.{key} must be a list")
            return tuple(parse_fraction(v) for v in value)
        return parse_fraction(value)
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{section}.{key} must be a list")
        kind = type(default[0]) if default else float
        return tuple(kind(v) for v in value)
    if isinstance(default, bool) or default is None:
        return value
    if isinstance(default, int) and not isinstance(value, int):
        raise ConfigError(f"{section}.{key} must be an integer")
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{section}.{key} must be a number")
        return float(value)
    return value


def config_from_dict(data: dict) -> ExperimentConfig:
    unknown = set(data) - set(_SECTIONS) - {"output"}
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    kwargs = {}
    for name, cls in _SECTIONS.items():
        raw = data.get(name, {})
        if not isinstance(raw, dict):
            raise ConfigError(f"[{name}] must be a table")
        defaults = {f.name: getattr(cls(), f.name) for f in dataclasses.fields(cls)}
        bad = set(raw) - set(defaults)
        if bad:
            raise ConfigError(f"unknown keys in [{name}]: {sorted(bad)}")
        values = {k: _coerce(name, k, v, defaults[k]) for k, v in raw.items()}
        try:
            kwargs[name] = cls(**values)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"[{name}]: {e}") from e
    if "output" in data:
        if not isinstance(data["output"], str):
            raise ConfigError("output must be a string")
        kwargs["output"] = data["output"]
    return ExperimentConfig(**kwargs)


def load_config(path: str | os.PathLike) -> ExperimentConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from e
    return config_from_dict(data)
